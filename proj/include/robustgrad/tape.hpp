#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "robustgrad/errors.hpp"
#include "robustgrad/tensor.hpp"

namespace robustgrad {

template <Real T>
class Tape;

/// Handle to a tensor recorded on a Tape. Cheap to copy; only valid while the tape lives.
template <Real T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::uint32_t id() const noexcept { return id_; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  T item() const { return value().item(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Network passes executed on a tape, in the units of a single forward pass.
struct PassTally {
  std::size_t forward = 0;
  std::size_t backward = 0;

  std::size_t total() const noexcept { return forward + backward; }
  PassTally& operator+=(const PassTally& o) {
    forward += o.forward;
    backward += o.backward;
    return *this;
  }
  friend PassTally operator+(PassTally a, const PassTally& b) { return a += b; }
  friend bool operator==(const PassTally&, const PassTally&) = default;
};

/// What a span of recorded nodes represents, for pass accounting. A reverse sweep over a
/// forward segment costs one pass; a sweep over a recorded backward segment costs two,
/// because every adjoint rule there is itself a product of two recorded quantities.
enum class SegmentKind : std::uint8_t { forward, backward };

/// Reverse-mode tape. Nodes are appended in creation order, which is a topological order.
/// With create_graph, the adjoint computations of gradient() are recorded on the same tape
/// and are themselves differentiable.
template <Real T>
class Tape {
 public:
  /// Computes adjoints of the parents of a node given the node's adjoint. `need[i]` says
  /// whether parent i wants one; entries of `out` left invalid mean "zero".
  using BackwardFn =
      std::function<void(Tape& tape, std::uint32_t self, const Var<T>& grad, std::span<const std::uint8_t> need,
                         std::span<Var<T>> out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> variable(Tensor<T> value) { return push(std::move(value), {}, {}, true); }
  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, {}, false); }
  Var<T> scalar(T v) { return constant(Tensor<T>::scalar(v)); }

  /// Copy of `v` with no history.
  Var<T> detach(const Var<T>& v) { return constant(v.value()); }

  /// Records the result of a primitive. The node requires grad only when recording is on
  /// and some parent requires grad; otherwise the backward rule is dropped.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn backward) {
    bool rg = false;
    if (grad_enabled_) {
      for (const auto& p : parents) rg = rg || requires_grad(p.id());
    }
    if (!rg) return push(std::move(value), {}, {}, false);
    std::vector<std::uint32_t> ids;
    ids.reserve(parents.size());
    for (const auto& p : parents) {
      if (&p.tape() != this) throw Error("operands recorded on different tapes");
      ids.push_back(p.id());
    }
    return push(std::move(value), std::move(ids), std::move(backward), true);
  }

  const Tensor<T>& value(std::uint32_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::uint32_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::span<const std::uint32_t> parents(std::uint32_t id) const { return nodes_.at(id).parents; }

  bool grad_enabled() const noexcept { return grad_enabled_; }

  /// Disables recording for its lifetime.
  class NoGradGuard {
   public:
    explicit NoGradGuard(Tape& t) : tape_(t), prev_(t.grad_enabled_) { t.grad_enabled_ = false; }
    ~NoGradGuard() { tape_.grad_enabled_ = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    Tape& tape_;
    bool prev_;
  };

  /// Tags nodes recorded during its lifetime as one network pass.
  class SegmentGuard {
   public:
    SegmentGuard(Tape& t, SegmentKind kind) : tape_(t), prev_(t.current_segment_) {
      t.current_segment_ = static_cast<std::int32_t>(t.segments_.size());
      t.segments_.push_back(kind);
      if (kind == SegmentKind::forward) ++t.tally_.forward;
    }
    ~SegmentGuard() { tape_.current_segment_ = prev_; }
    SegmentGuard(const SegmentGuard&) = delete;
    SegmentGuard& operator=(const SegmentGuard&) = delete;

   private:
    Tape& tape_;
    std::int32_t prev_;
  };

  const PassTally& tally() const noexcept { return tally_; }
  void reset_tally() { tally_ = {}; }

  /// d output / d wrt_i for scalar `output`. Tensors in `wrt` that do not influence the
  /// output get zero gradients. With create_graph the results are differentiable.
  std::vector<Var<T>> gradient(const Var<T>& output, std::span<const Var<T>> wrt, bool create_graph = false);

  std::vector<Var<T>> gradient(const Var<T>& output, std::initializer_list<Var<T>> wrt,
                               bool create_graph = false) {
    return gradient(output, std::span<const Var<T>>(wrt.begin(), wrt.size()), create_graph);
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<std::uint32_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    std::int32_t segment = -1;
  };

  Var<T> push(Tensor<T> value, std::vector<std::uint32_t> parents, BackwardFn fn, bool rg) {
    nodes_.push_back(Node{std::move(value), std::move(parents), std::move(fn), rg, current_segment_});
    return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  std::deque<Node> nodes_;
  std::vector<SegmentKind> segments_;
  std::int32_t current_segment_ = -1;
  bool grad_enabled_ = true;
  PassTally tally_;
};

template <Real T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <Real T>
std::vector<Var<T>> Tape<T>::gradient(const Var<T>& output, std::span<const Var<T>> wrt, bool create_graph) {
  if (output.size() != 1) throw NonScalarOutput("gradient of tensor with shape " + to_string(output.shape()));
  const std::uint32_t top = output.id();

  // needed[i]: node i lies on a path from some wrt tensor to the output.
  std::vector<char> is_wrt(top + 1, 0);
  for (const auto& w : wrt) {
    if (w.id() <= top) is_wrt[w.id()] = 1;
  }
  std::vector<char> needed(top + 1, 0);
  for (std::uint32_t i = 0; i <= top; ++i) {
    const Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    bool nd = is_wrt[i] != 0;
    for (auto p : n.parents) nd = nd || needed[p];
    needed[i] = nd;
  }

  std::vector<Var<T>> adj(top + 1);
  std::vector<char> touched(segments_.size(), 0);
  {
    NoGradGuard off(*this);
    if (!create_graph) {
      adj[top] = constant(Tensor<T>(output.shape(), T(1)));
    }
  }

  auto sweep = [&] {
    if (create_graph) adj[top] = constant(Tensor<T>(output.shape(), T(1)));
    std::vector<std::uint8_t> need_buf;
    std::vector<Var<T>> out_buf;
    for (std::uint32_t i = top + 1; i-- > 0;) {
      if (!needed[i] || !adj[i].valid()) continue;
      const Node& n = nodes_[i];
      if (!n.backward) continue;
      if (n.segment >= 0) touched[static_cast<std::size_t>(n.segment)] = 1;
      need_buf.assign(n.parents.size(), 0);
      bool any = false;
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        need_buf[k] = needed[n.parents[k]];
        any = any || need_buf[k];
      }
      if (!any) continue;
      out_buf.assign(n.parents.size(), Var<T>());
      // The node reference stays valid: nodes_ is a deque and only grows at the back.
      const auto parents = n.parents;
      n.backward(*this, i, adj[i], need_buf, out_buf);
      for (std::size_t k = 0; k < parents.size(); ++k) {
        if (!need_buf[k] || !out_buf[k].valid()) continue;
        auto& slot = adj[parents[k]];
        slot = slot.valid() ? add(slot, out_buf[k]) : out_buf[k];
      }
    }
  };

  if (create_graph) {
    SegmentGuard seg(*this, SegmentKind::backward);
    sweep();
  } else {
    NoGradGuard off(*this);
    sweep();
  }

  for (std::size_t s = 0; s < touched.size(); ++s) {
    if (touched[s]) tally_.backward += segments_[s] == SegmentKind::forward ? 1 : 2;
  }

  std::vector<Var<T>> result;
  result.reserve(wrt.size());
  NoGradGuard off(*this);
  for (const auto& w : wrt) {
    if (w.id() <= top && adj[w.id()].valid()) {
      result.push_back(adj[w.id()]);
    } else {
      result.push_back(constant(Tensor<T>(w.shape(), T(0))));
    }
  }
  return result;
}

/// Tape-level convenience matching the GradientRequest shape.
template <Real T>
struct GradientRequest {
  Var<T> output;
  std::vector<Var<T>> wrt;
  bool create_graph = false;
};

template <Real T>
std::vector<Var<T>> gradient(const GradientRequest<T>& req) {
  return req.output.tape().gradient(req.output, req.wrt, req.create_graph);
}

}  // namespace robustgrad
