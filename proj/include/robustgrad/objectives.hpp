#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "robustgrad/attacks.hpp"
#include "robustgrad/edges.hpp"
#include "robustgrad/losses.hpp"
#include "robustgrad/nn/network.hpp"

namespace robustgrad {

struct NoNoise {
  bool operator==(const NoNoise&) const = default;
};
struct GaussianNoise {
  double std = 0.0;  // raw pixel units
  bool operator==(const GaussianNoise&) const = default;
};
struct AdversarialNoise {
  AttackConfig attack;
  bool operator==(const AdversarialNoise&) const = default;
};
using InputNoise = std::variant<NoNoise, GaussianNoise, AdversarialNoise>;

/// lambda_ce * CE + lambda_gn * (epsilon / sigma) * ||w_c * grad_x CE||_1, with the
/// gradient taken at the normalized network input.
struct GradNormConfig {
  double lambda_ce = 0.8;
  double lambda_gn = 1.2;
  double epsilon = 4.0 / 255.0;
  double sigma = 0.225;
  std::vector<double> channel_weights;  // empty means all 1
  InputNoise input_noise = NoNoise{};
  double label_smoothing = 0.0;

  double penalty_scale() const { return lambda_gn * epsilon / sigma; }

  void validate() const {
    if (!(lambda_ce >= 0) || !(lambda_gn >= 0)) throw Error("gradnorm weights must be >= 0");
    if (!(sigma > 0)) throw Error("gradnorm sigma must be > 0");
    for (double w : channel_weights)
      if (!(w > 0)) throw Error("gradnorm channel weights must be > 0");
  }
};

struct EdgeRegConfig {
  double temperature = 0.5;
  EdgeFilter edge_filter = EdgeFilter::sobel();
  double clamp_floor = 1e-3;

  void validate() const {
    if (!(temperature > 0)) throw Error("edge temperature must be > 0");
    if (!(clamp_floor > 0)) throw Error("edge clamp floor must be > 0");
  }
};

struct AdvTrainConfig {
  AttackConfig attack = AttackConfig::pgd(4.0 / 255.0, 3);
  double label_smoothing = 0.0;
};

/// A recorded training loss plus the numbers the trainer logs.
template <Real T>
struct LossTerms {
  Var<T> loss;
  double ce = 0;            // mean cross entropy of the term that was optimized
  double grad_l1 = 0;       // mean per-example ||grad_x L||_1 at the normalized input, when computed
  std::size_t skipped = 0;  // examples dropped by the edge loss
  PassTally extra;          // passes spent on other tapes (attack inner loops)
};

namespace detail {

template <Real T>
Tensor<T> apply_noise(const Network<T>& net, const Tensor<T>& x, std::span<const std::size_t> y,
                      const InputNoise& noise, Rng& rng, PassTally& extra) {
  if (const auto* g = std::get_if<GaussianNoise>(&noise)) {
    Tensor<T> out = x;
    for (auto& v : out.data()) v += static_cast<T>(g->std * rng.normal());
    return out;
  }
  if (const auto* a = std::get_if<AdversarialNoise>(&noise)) {
    auto r = pgd(net, x, y, a->attack, rng);
    extra += r.passes;
    return r.adversarial;
  }
  return x;
}

}  // namespace detail

/// Gradient-norm regularized loss. The input-gradient graph is kept so the result can be
/// differentiated again with respect to `params`.
template <Real T>
LossTerms<T> gradnorm_loss(const Network<T>& net, Tape<T>& tape, std::span<const Var<T>> params, const Tensor<T>& x,
                           std::span<const std::size_t> y, const GradNormConfig& cfg, Rng& rng) {
  cfg.validate();
  LossTerms<T> out;
  const Tensor<T> xp = detail::apply_noise(net, x, y, cfg.input_noise, rng, out.extra);
  const auto xn = tape.variable(normalize(xp, net.normalization()));
  const auto logits = net.forward_normalized(tape, xn, params);
  const auto ce = cross_entropy(logits, y, cfg.label_smoothing);
  const T b = static_cast<T>(y.size());
  auto g = tape.gradient(scale(ce, b), {xn}, true)[0];
  if (!cfg.channel_weights.empty()) {
    const std::size_t c = xn.shape()[1];
    if (cfg.channel_weights.size() != c) throw ShapeMismatch("gradnorm channel weights vs input channels");
    Tensor<T> w({1, c, 1, 1});
    for (std::size_t i = 0; i < c; ++i) w[i] = static_cast<T>(cfg.channel_weights[i]);
    g = mul(g, tape.constant(std::move(w)));
  }
  const auto l1 = scale(sum(abs(g)), T(1) / b);
  out.loss = add(scale(ce, static_cast<T>(cfg.lambda_ce)), scale(l1, static_cast<T>(cfg.penalty_scale())));
  out.ce = ce.item();
  out.grad_l1 = l1.item();
  return out;
}

/// Plain cross entropy on the clean batch.
template <Real T>
LossTerms<T> natural_loss(const Network<T>& net, Tape<T>& tape, std::span<const Var<T>> params, const Tensor<T>& x,
                          std::span<const std::size_t> y, double smoothing = 0.0, NormCapture<T>* capture = nullptr) {
  LossTerms<T> out;
  const auto logits = net.forward(tape, tape.constant(x), params, capture);
  out.loss = cross_entropy(logits, y, smoothing);
  out.ce = out.loss.item();
  return out;
}

/// Mean over the batch of 1 - cos(grad_x f_t, edge(x)), with t drawn from
/// softmax(f(x) / temperature). Single-channel edge maps are repeated across channels.
/// Examples where either vector is numerically zero are skipped and counted.
template <Real T>
LossTerms<T> edge_reg_loss(const Network<T>& net, Tape<T>& tape, std::span<const Var<T>> params, const Tensor<T>& x,
                           const EdgeRegConfig& cfg, Rng& rng, Var<T>* logits_out = nullptr) {
  cfg.validate();
  LossTerms<T> out;
  const std::size_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3), per = c * plane;
  const auto xn = tape.variable(normalize(x, net.normalization()));
  const auto logits = net.forward_normalized(tape, xn, params);
  if (logits_out) *logits_out = logits;
  const std::size_t k = logits.shape()[1];
  Tensor<T> pick({b, k}, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    const auto p = softmax_row(logits.value(), i, cfg.temperature);
    pick[i * k + rng.categorical(p)] = T(1);
  }
  const auto selected = sum(mul(logits, tape.constant(std::move(pick))));
  const auto g = reshape(tape.gradient(selected, {xn}, true)[0], Shape{b, per});

  const auto energy = oriented_energy(x, cfg.edge_filter);  // [B,H,W]
  Tensor<T> e({b, per}), keep({b, 1}, T(0));
  const auto gnorm = per_example_l2(g.value());
  for (std::size_t i = 0; i < b; ++i) {
    double en = 0;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < plane; ++j) {
        const T v = energy[i * plane + j];
        e[i * per + ch * plane + j] = v;
        en += static_cast<double>(v) * v;
      }
    en = std::sqrt(en);
    if (gnorm[i] < 1e-12 || en < 1e-12) {
      ++out.skipped;
      continue;
    }
    keep[i] = T(1);
    for (std::size_t j = 0; j < per; ++j) e[i * per + j] /= static_cast<T>(en);
  }
  const std::size_t used = b - out.skipped;
  if (used == 0) {
    out.loss = tape.scalar(T(0));
    return out;
  }
  const auto dot = reshape(sum_axis(mul(g, tape.constant(std::move(e))), 1), Shape{b});
  const auto norm = reshape(sqrt(shift(sum_axis(mul(g, g), 1), std::numeric_limits<T>::min())), Shape{b});
  const auto cosv = div(dot, norm);
  const auto kept = reshape(tape.constant(std::move(keep)), Shape{b});
  const auto one_minus = mul(sub(tape.constant(Tensor<T>({b}, T(1))), cosv), kept);
  out.loss = scale(sum(one_minus), T(1) / static_cast<T>(used));
  return out;
}

/// Cross entropy at PGD-perturbed inputs. The inner maximization runs on its own tapes
/// with parameters held constant.
template <Real T>
LossTerms<T> adv_train_loss(const Network<T>& net, Tape<T>& tape, std::span<const Var<T>> params, const Tensor<T>& x,
                            std::span<const std::size_t> y, const AdvTrainConfig& cfg, Rng& rng,
                            NormCapture<T>* capture = nullptr) {
  cfg.attack.validate();
  LossTerms<T> out;
  Tensor<T> xa = x;
  if (cfg.attack.restarts == 1 && cfg.attack.method == AttackMethod::pgd) {
    auto r = detail::pgd_restart(net, x, y, cfg.attack, rng, false);
    out.extra += r.passes;
    xa = std::move(r.adversarial);
  } else {
    auto r = run_attack(net, x, y, cfg.attack, rng);
    out.extra += r.passes;
    xa = std::move(r.adversarial);
  }
  const auto logits = net.forward(tape, tape.constant(xa), params, capture);
  out.loss = cross_entropy(logits, y, cfg.label_smoothing);
  out.ce = out.loss.item();
  return out;
}

enum class ObjectiveKind { natural, gradnorm, edgereg, advtrain, fgsm_train };

inline std::optional<ObjectiveKind> parse_objective(std::string_view s) {
  if (s == "natural") return ObjectiveKind::natural;
  if (s == "gradnorm") return ObjectiveKind::gradnorm;
  if (s == "edgereg") return ObjectiveKind::edgereg;
  if (s == "advtrain") return ObjectiveKind::advtrain;
  if (s == "fgsm-train") return ObjectiveKind::fgsm_train;
  return std::nullopt;
}

inline std::string_view objective_name(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::natural: return "natural";
    case ObjectiveKind::gradnorm: return "gradnorm";
    case ObjectiveKind::edgereg: return "edgereg";
    case ObjectiveKind::advtrain: return "advtrain";
    case ObjectiveKind::fgsm_train: return "fgsm-train";
  }
  return "?";
}

/// Everything needed to build the training loss of one batch.
struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::natural;
  GradNormConfig gradnorm;
  EdgeRegConfig edge;
  double edge_ce_weight = 1.0;  // edgereg trains ce_weight * CE + edge_weight * edge loss
  double edge_weight = 1.0;
  AdvTrainConfig adv;           // advtrain and fgsm-train
  double label_smoothing = 0.0;
};

/// Loss for one batch under `cfg`. Train-mode norm statistics are captured only by
/// objectives that run a single clean forward pass.
template <Real T>
LossTerms<T> objective_loss(const Network<T>& net, Tape<T>& tape, std::span<const Var<T>> params, const Tensor<T>& x,
                            std::span<const std::size_t> y, const ObjectiveConfig& cfg, Rng& rng,
                            NormCapture<T>* capture = nullptr) {
  switch (cfg.kind) {
    case ObjectiveKind::natural: return natural_loss(net, tape, params, x, y, cfg.label_smoothing, capture);
    case ObjectiveKind::gradnorm: {
      GradNormConfig g = cfg.gradnorm;
      g.label_smoothing = cfg.label_smoothing;
      return gradnorm_loss(net, tape, params, x, y, g, rng);
    }
    case ObjectiveKind::edgereg: {
      Var<T> logits;
      auto terms = edge_reg_loss(net, tape, params, x, cfg.edge, rng, &logits);
      const auto ce = cross_entropy(logits, y, cfg.label_smoothing);
      terms.loss = add(scale(ce, static_cast<T>(cfg.edge_ce_weight)), scale(terms.loss, static_cast<T>(cfg.edge_weight)));
      terms.ce = ce.item();
      return terms;
    }
    case ObjectiveKind::advtrain:
    case ObjectiveKind::fgsm_train: {
      AdvTrainConfig a = cfg.adv;
      a.label_smoothing = cfg.label_smoothing;
      if (cfg.kind == ObjectiveKind::fgsm_train) {
        a.attack.method = AttackMethod::pgd;
        a.attack.iterations = 1;
        a.attack.restarts = 1;
        if (!a.attack.random_init) a.attack.step_size = a.attack.epsilon;
      }
      return adv_train_loss(net, tape, params, x, y, a, rng, capture);
    }
  }
  throw Error("unknown objective");
}

/// Network passes for one training batch of the objective (loss plus parameter gradient),
/// measured by running it on `x`, `y`.
template <Real T>
PassTally measure_pass_count(const Network<T>& net, const Tensor<T>& x, std::span<const std::size_t> y,
                             const ObjectiveConfig& cfg, std::uint64_t seed = 0) {
  Tape<T> tape;
  Rng rng(seed);
  const auto params = net.bind(tape, true);
  auto terms = objective_loss(net, tape, std::span<const Var<T>>(params), x, y, cfg, rng);
  tape.gradient(terms.loss, std::span<const Var<T>>(params));
  return tape.tally() + terms.extra;
}

}  // namespace robustgrad
