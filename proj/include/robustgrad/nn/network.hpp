#pragma once

#include <charconv>
#include <cmath>
#include <concepts>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "robustgrad/activation.hpp"
#include "robustgrad/data/normalization.hpp"
#include "robustgrad/ops.hpp"
#include "robustgrad/rng.hpp"
#include "robustgrad/tape.hpp"

namespace robustgrad {

enum class LayerKind { conv, dense, pool, norm, act };

/// One hidden layer. The classification head (dense to num_classes) is appended
/// automatically and is not listed here.
struct LayerSpec {
  LayerKind kind = LayerKind::act;
  std::size_t out = 0;      // conv channels or dense width
  std::size_t kernel = 3;   // conv kernel side, pool window
  std::size_t padding = 1;  // conv zero padding

  static LayerSpec conv(std::size_t out, std::size_t kernel = 3, std::size_t padding = 1) {
    return {LayerKind::conv, out, kernel, padding};
  }
  static LayerSpec dense(std::size_t width) { return {LayerKind::dense, width, 0, 0}; }
  static LayerSpec pool(std::size_t k = 2) { return {LayerKind::pool, 0, k, 0}; }
  static LayerSpec norm() { return {LayerKind::norm, 0, 0, 0}; }
  static LayerSpec act() { return {LayerKind::act, 0, 0, 0}; }

  bool operator==(const LayerSpec&) const = default;
};

/// Text form used in configs and checkpoints: "conv:16:3:1", "dense:64", "pool:2", "norm", "act".
inline std::string layer_to_string(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::conv:
      return "conv:" + std::to_string(l.out) + ":" + std::to_string(l.kernel) + ":" + std::to_string(l.padding);
    case LayerKind::dense: return "dense:" + std::to_string(l.out);
    case LayerKind::pool: return "pool:" + std::to_string(l.kernel);
    case LayerKind::norm: return "norm";
    case LayerKind::act: return "act";
  }
  return "?";
}

inline LayerSpec parse_layer(std::string_view s) {
  std::vector<std::size_t> nums;
  const auto colon = s.find(':');
  const std::string_view head = s.substr(0, colon);
  std::string_view rest = colon == std::string_view::npos ? std::string_view{} : s.substr(colon + 1);
  while (!rest.empty()) {
    const auto next = rest.find(':');
    const auto tok = rest.substr(0, next);
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || p != tok.data() + tok.size()) throw Error("bad layer spec '" + std::string(s) + "'");
    nums.push_back(v);
    rest = next == std::string_view::npos ? std::string_view{} : rest.substr(next + 1);
  }
  auto arg = [&](std::size_t i, std::size_t dflt) { return i < nums.size() ? nums[i] : dflt; };
  if (head == "conv" && !nums.empty() && nums.size() <= 3) return LayerSpec::conv(nums[0], arg(1, 3), arg(2, 1));
  if (head == "dense" && nums.size() == 1) return LayerSpec::dense(nums[0]);
  if (head == "pool" && nums.size() <= 1) return LayerSpec::pool(arg(0, 2));
  if (head == "norm" && nums.empty()) return LayerSpec::norm();
  if (head == "act" && nums.empty()) return LayerSpec::act();
  throw Error("bad layer spec '" + std::string(s) + "'");
}

struct NetworkConfig {
  std::vector<LayerSpec> layers;
  ActivationKind activation = ActivationKind::relu;
  std::size_t num_classes = 10;
  Shape input_shape{1, 28, 28};  // C, H, W
  Normalization normalization = Normalization::identity(1);

  bool operator==(const NetworkConfig&) const = default;

  /// Shape after each hidden layer (without batch), then the logits shape. Throws on any
  /// layer that does not compose with its input.
  std::vector<Shape> layer_shapes() const {
    if (num_classes < 2) throw Error("num_classes must be at least 2");
    if (input_shape.size() != 3 || numel(input_shape) == 0) throw ShapeMismatch("input_shape must be C,H,W");
    if (normalization.channels() != input_shape[0]) throw ShapeMismatch("normalization channels vs input channels");
    normalization.validate();
    std::vector<Shape> shapes;
    Shape s = input_shape;
    for (const auto& l : layers) {
      switch (l.kind) {
        case LayerKind::conv:
          if (s.size() != 3) throw ShapeMismatch("conv after dense layer");
          if (l.out == 0 || l.kernel == 0 || s[1] + 2 * l.padding < l.kernel || s[2] + 2 * l.padding < l.kernel) {
            throw ShapeMismatch("conv layer " + layer_to_string(l) + " on " + to_string(s));
          }
          s = {l.out, s[1] + 2 * l.padding - l.kernel + 1, s[2] + 2 * l.padding - l.kernel + 1};
          break;
        case LayerKind::dense:
          if (l.out == 0) throw ShapeMismatch("dense width 0");
          s = {l.out};
          break;
        case LayerKind::pool:
          if (s.size() != 3 || l.kernel == 0 || s[1] % l.kernel || s[2] % l.kernel) {
            throw ShapeMismatch("pool " + layer_to_string(l) + " on " + to_string(s));
          }
          s = {s[0], s[1] / l.kernel, s[2] / l.kernel};
          break;
        case LayerKind::norm:
        case LayerKind::act: break;
      }
      shapes.push_back(s);
    }
    shapes.push_back({num_classes});
    return shapes;
  }
};

/// Built-in architectures. "cnn-small" is two conv blocks with average pooling and a dense
/// layer; "cnn-small-bn" adds batch norm after each conv.
inline std::optional<NetworkConfig> network_preset(std::string_view name, ActivationKind act, Shape input_shape,
                                                   std::size_t num_classes) {
  NetworkConfig cfg;
  cfg.activation = act;
  cfg.input_shape = input_shape;
  cfg.num_classes = num_classes;
  cfg.normalization = Normalization::identity(input_shape.at(0));
  using L = LayerSpec;
  if (name == "mlp-2x256" || name == "mlp-2×256") {
    cfg.layers = {L::dense(256), L::act(), L::dense(256), L::act()};
  } else if (name == "cnn-small") {
    cfg.layers = {L::conv(8), L::act(), L::pool(2), L::conv(16), L::act(), L::pool(2), L::dense(64), L::act()};
  } else if (name == "cnn-small-bn") {
    cfg.layers = {L::conv(8), L::norm(), L::act(), L::pool(2), L::conv(16), L::norm(), L::act(), L::pool(2),
                  L::dense(64), L::act()};
  } else if (name == "linear") {
    cfg.layers = {};
  } else {
    return std::nullopt;
  }
  return cfg;
}

enum class NormMode { train, eval };

template <Real T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// Batch statistics observed by norm layers during a train-mode forward pass.
template <Real T>
struct NormCapture {
  std::vector<Tensor<T>> mean, var;
};

/// Anything that maps a raw-pixel batch to logits on a tape.
template <class M, class T>
concept Classifier = requires(const M& m, Tape<T>& tape, const Var<T>& x) {
  { m.forward(tape, x) } -> std::convertible_to<Var<T>>;
  { m.num_classes() } -> std::convertible_to<std::size_t>;
};

template <Real T = double>
class Network {
 public:
  static constexpr double kNormEps = 1e-5;
  static constexpr double kNormMomentum = 0.1;

  Network() = default;

  /// He-uniform weights, zero biases, unit norm scales.
  Network(NetworkConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    const auto shapes = cfg_.layer_shapes();
    Shape in = cfg_.input_shape;
    auto he = [&](const Shape& shape, std::size_t fan_in) {
      Tensor<T> w(shape);
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
      return w;
    };
    for (std::size_t i = 0; i <= cfg_.layers.size(); ++i) {
      const bool head = i == cfg_.layers.size();
      const LayerSpec l = head ? LayerSpec::dense(cfg_.num_classes) : cfg_.layers[i];
      const std::string prefix = head ? "head." : std::to_string(i) + ".";
      switch (l.kind) {
        case LayerKind::conv:
          params_.push_back({prefix + "weight", he({l.out, in[0], l.kernel, l.kernel}, in[0] * l.kernel * l.kernel)});
          params_.push_back({prefix + "bias", Tensor<T>({l.out}, T(0))});
          break;
        case LayerKind::dense:
          params_.push_back({prefix + "weight", he({l.out, numel(in)}, numel(in))});
          params_.push_back({prefix + "bias", Tensor<T>({l.out}, T(0))});
          break;
        case LayerKind::norm:
          params_.push_back({prefix + "scale", Tensor<T>({in[0]}, T(1))});
          params_.push_back({prefix + "shift", Tensor<T>({in[0]}, T(0))});
          buffers_.push_back({prefix + "running_mean", Tensor<T>({in[0]}, T(0))});
          buffers_.push_back({prefix + "running_var", Tensor<T>({in[0]}, T(1))});
          break;
        case LayerKind::pool:
        case LayerKind::act: break;
      }
      if (!head) in = shapes[i];
    }
  }

  const NetworkConfig& config() const noexcept { return cfg_; }
  std::size_t num_classes() const noexcept { return cfg_.num_classes; }
  const Normalization& normalization() const noexcept { return cfg_.normalization; }
  void set_normalization(Normalization n) {
    if (n.channels() != cfg_.input_shape[0]) throw ShapeMismatch("normalization channels vs input channels");
    n.validate();
    cfg_.normalization = std::move(n);
  }

  std::vector<NamedTensor<T>>& parameters() noexcept { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const noexcept { return params_; }
  std::vector<NamedTensor<T>>& buffers() noexcept { return buffers_; }
  const std::vector<NamedTensor<T>>& buffers() const noexcept { return buffers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  NormMode norm_mode() const noexcept { return mode_; }
  void set_norm_mode(NormMode m) noexcept { mode_ = m; }

  /// Same parameters, different activation.
  Network with_activation(ActivationKind kind) const {
    Network out = *this;
    out.cfg_.activation = kind;
    return out;
  }

  /// Puts the parameters on `tape`, as variables when `trainable`.
  std::vector<Var<T>> bind(Tape<T>& tape, bool trainable) const {
    std::vector<Var<T>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(trainable ? tape.variable(p.value) : tape.constant(p.value));
    return out;
  }

  /// Logits for a raw-pixel batch [B,C,H,W], with parameters as constants.
  Var<T> forward(Tape<T>& tape, const Var<T>& x) const { return forward(tape, x, bind(tape, false)); }

  Var<T> forward(Tape<T>& tape, const Var<T>& x, std::span<const Var<T>> params,
                 NormCapture<T>* capture = nullptr) const {
    return forward_normalized(tape, normalize_input(tape, x), params, capture);
  }

  /// Differentiable raw -> normalized map applied at the start of forward().
  Var<T> normalize_input(Tape<T>& tape, const Var<T>& x) const {
    check_input(x.shape());
    const std::size_t c = cfg_.input_shape[0];
    Tensor<T> m({1, c, 1, 1}), inv({1, c, 1, 1});
    for (std::size_t i = 0; i < c; ++i) {
      m[i] = static_cast<T>(cfg_.normalization.mean[i]);
      inv[i] = static_cast<T>(1.0 / cfg_.normalization.std[i]);
    }
    return mul(sub(x, tape.constant(std::move(m))), tape.constant(std::move(inv)));
  }

  /// Logits for an already normalized batch. `params` must come from bind() or match it.
  Var<T> forward_normalized(Tape<T>& tape, const Var<T>& xn, std::span<const Var<T>> params,
                            NormCapture<T>* capture = nullptr) const {
    check_input(xn.shape());
    if (params.size() != params_.size()) throw ShapeMismatch("parameter count");
    typename Tape<T>::SegmentGuard pass(tape, SegmentKind::forward);
    const std::size_t batch = xn.shape()[0];
    Var<T> h = xn;
    std::size_t p = 0, b = 0;
    for (std::size_t i = 0; i <= cfg_.layers.size(); ++i) {
      const bool head = i == cfg_.layers.size();
      const LayerSpec l = head ? LayerSpec::dense(cfg_.num_classes) : cfg_.layers[i];
      switch (l.kind) {
        case LayerKind::conv: {
          h = conv2d(h, params[p], l.padding);
          h = add(h, reshape(params[p + 1], Shape{1, l.out, 1, 1}));
          p += 2;
          break;
        }
        case LayerKind::dense: {
          if (h.shape().size() != 2) h = reshape(h, Shape{batch, h.size() / batch});
          h = add(matmul(h, params[p], false, true), params[p + 1]);
          p += 2;
          break;
        }
        case LayerKind::pool: h = avg_pool2d(h, l.kernel); break;
        case LayerKind::act: h = activation(cfg_.activation, h); break;
        case LayerKind::norm: {
          h = batch_norm(tape, h, params[p], params[p + 1], buffers_[b].value, buffers_[b + 1].value, capture);
          p += 2;
          b += 2;
          break;
        }
      }
    }
    return h;
  }

  /// Folds captured batch statistics into the running estimates.
  void update_running_stats(const NormCapture<T>& cap) {
    if (cap.mean.size() * 2 != buffers_.size()) throw ShapeMismatch("norm capture size");
    const T mom = static_cast<T>(kNormMomentum);
    for (std::size_t k = 0; k < cap.mean.size(); ++k) {
      auto& rm = buffers_[2 * k].value;
      auto& rv = buffers_[2 * k + 1].value;
      for (std::size_t c = 0; c < rm.size(); ++c) {
        rm[c] = (T(1) - mom) * rm[c] + mom * cap.mean[k][c];
        rv[c] = (T(1) - mom) * rv[c] + mom * cap.var[k][c];
      }
    }
  }

 private:
  void check_input(const Shape& s) const {
    if (s.size() != 4 || s[0] == 0 || s[1] != cfg_.input_shape[0] || s[2] != cfg_.input_shape[1] ||
        s[3] != cfg_.input_shape[2]) {
      throw ShapeMismatch("network input " + to_string(s) + ", expected [B," + std::to_string(cfg_.input_shape[0]) +
                          "," + std::to_string(cfg_.input_shape[1]) + "," + std::to_string(cfg_.input_shape[2]) + "]");
    }
  }

  Var<T> batch_norm(Tape<T>& tape, const Var<T>& h, const Var<T>& gamma, const Var<T>& beta, const Tensor<T>& rmean,
                    const Tensor<T>& rvar, NormCapture<T>* capture) const {
    const Shape& s = h.shape();
    const std::size_t c = s[1];
    const Shape stat = s.size() == 4 ? Shape{1, c, 1, 1} : Shape{1, c};
    Var<T> mu, var;
    if (mode_ == NormMode::train) {
      const T count = static_cast<T>(h.size() / c);
      mu = scale(sum_to(h, stat), T(1) / count);
      const auto centered = sub(h, mu);
      var = scale(sum_to(mul(centered, centered), stat), T(1) / count);
      if (capture) {
        capture->mean.push_back(mu.value().reshaped({c}));
        capture->var.push_back(var.value().reshaped({c}));
      }
    } else {
      mu = tape.constant(rmean.reshaped(stat));
      var = tape.constant(rvar.reshaped(stat));
    }
    const auto inv = pow(shift(var, static_cast<T>(kNormEps)), T(-0.5));
    return add(mul(mul(sub(h, mu), inv), reshape(gamma, stat)), reshape(beta, stat));
  }

  NetworkConfig cfg_;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  NormMode mode_ = NormMode::eval;
};

/// Same parameters, new activation.
template <Real T>
Network<T> swap_activation(const Network<T>& net, ActivationKind kind) {
  return net.with_activation(kind);
}

/// Per-class logits for a batch without recording gradients.
template <Real T, Classifier<T> M>
Tensor<T> predict_logits(const M& model, const Tensor<T>& x) {
  Tape<T> tape;
  typename Tape<T>::NoGradGuard off(tape);
  return model.forward(tape, tape.constant(x)).value();
}

template <Real T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.size() / k;
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[r * k + j] > logits[r * k + best]) best = j;
    out[r] = best;
  }
  return out;
}

}  // namespace robustgrad
