#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "robustgrad/data/dataset.hpp"
#include "robustgrad/gradients.hpp"
#include "robustgrad/nn/checkpoint.hpp"
#include "robustgrad/parallel.hpp"
#include "robustgrad/rng.hpp"

namespace robustgrad {

enum class AttackMethod { pgd, fgsm, random_search };
enum class AttackDirection { sign, l2 };

inline std::optional<AttackMethod> parse_attack_method(std::string_view s) {
  if (s == "pgd") return AttackMethod::pgd;
  if (s == "fgsm") return AttackMethod::fgsm;
  if (s == "random-search") return AttackMethod::random_search;
  return std::nullopt;
}

inline std::string_view attack_method_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::pgd: return "pgd";
    case AttackMethod::fgsm: return "fgsm";
    case AttackMethod::random_search: return "random-search";
  }
  return "?";
}

/// L-infinity attack settings. Budgets and steps are in raw pixel units.
struct AttackConfig {
  AttackMethod method = AttackMethod::pgd;
  double epsilon = 4.0 / 255.0;
  double step_size = 1.0 / 255.0;
  std::size_t iterations = 10;  // gradient steps, or queries for random search
  std::size_t restarts = 1;
  bool random_init = false;
  AttackDirection direction = AttackDirection::sign;
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;

  /// PGD-k with the default evaluation step of epsilon / 4.
  static AttackConfig pgd(double epsilon, std::size_t iterations) {
    AttackConfig c;
    c.epsilon = epsilon;
    c.step_size = epsilon / 4.0;
    c.iterations = iterations;
    return c;
  }

  static AttackConfig fgsm(double epsilon) {
    AttackConfig c;
    c.method = AttackMethod::fgsm;
    c.epsilon = epsilon;
    c.step_size = epsilon;
    c.iterations = 1;
    return c;
  }

  void validate() const {
    if (!(epsilon >= 0)) throw Error("attack epsilon must be >= 0");
    if (method != AttackMethod::random_search && iterations > 0 && epsilon > 0 && !(step_size > 0)) {
      throw Error("attack step_size must be > 0");
    }
    if (restarts < 1) throw Error("attack restarts must be >= 1");
    if (!(clamp_lo < clamp_hi)) throw Error("attack clamp range is empty");
    if (method == AttackMethod::fgsm && iterations != 1) throw Error("fgsm takes exactly one iteration");
  }

  bool operator==(const AttackConfig&) const = default;
};

template <Real T>
struct AttackResult {
  Tensor<T> adversarial;
  std::vector<std::uint8_t> success;  // example misclassified at `adversarial`
  std::vector<double> loss;           // per-example loss at `adversarial`
  std::vector<double> loss_trace;     // mean loss before each step of the kept restart
  PassTally passes;

  double success_rate() const {
    if (success.empty()) return 0.0;
    return static_cast<double>(std::count(success.begin(), success.end(), 1)) / static_cast<double>(success.size());
  }
};

namespace detail {

template <Real T>
void project(Tensor<T>& xa, const Tensor<T>& x, const AttackConfig& cfg) {
  const T eps = static_cast<T>(cfg.epsilon), lo = static_cast<T>(cfg.clamp_lo), hi = static_cast<T>(cfg.clamp_hi);
  for (std::size_t i = 0; i < xa.size(); ++i) xa[i] = std::clamp(std::clamp(xa[i], x[i] - eps, x[i] + eps), lo, hi);
}

template <Real T, Classifier<T> M>
void evaluate_into(const M& model, const Tensor<T>& xa, std::span<const std::size_t> y, AttackResult<T>& r) {
  Tape<T> tape;
  typename Tape<T>::NoGradGuard off(tape);
  const auto logits = model.forward(tape, tape.constant(xa)).value();
  r.passes += tape.tally();
  r.loss = per_example_cross_entropy(logits, y);
  const auto pred = argmax_rows(logits);
  r.success.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) r.success[i] = pred[i] != y[i];
}

/// One restart of projected gradient ascent. Without `evaluate`, the final iterate is not
/// scored and `success`/`loss` stay empty.
template <Real T, Classifier<T> M>
AttackResult<T> pgd_restart(const M& model, const Tensor<T>& x, std::span<const std::size_t> y,
                            const AttackConfig& cfg, Rng& rng, bool evaluate) {
  AttackResult<T> r;
  Tensor<T> xa = x;
  if (cfg.random_init) {
    for (std::size_t i = 0; i < xa.size(); ++i) xa[i] += static_cast<T>(rng.uniform(-cfg.epsilon, cfg.epsilon));
    project(xa, x, cfg);
  }
  const std::size_t b = x.dim(0), per = x.size() / b;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    Tape<T> tape;
    const auto xv = tape.variable(xa);
    const auto logits = model.forward(tape, xv);
    const auto total = scale(cross_entropy(logits, y), static_cast<T>(b));
    r.loss_trace.push_back(total.item() / static_cast<double>(b));
    const auto g = tape.gradient(total, {xv})[0].value();
    r.passes += tape.tally();
    if (cfg.direction == AttackDirection::sign) {
      const T step = static_cast<T>(cfg.step_size);
      for (std::size_t i = 0; i < xa.size(); ++i) xa[i] += step * static_cast<T>((g[i] > 0) - (g[i] < 0));
    } else {
      const auto norms = per_example_l2(g);
      for (std::size_t n = 0; n < b; ++n) {
        if (norms[n] < 1e-12) continue;
        const double s = cfg.step_size / norms[n];
        for (std::size_t j = 0; j < per; ++j) xa[n * per + j] += static_cast<T>(s * g[n * per + j]);
      }
    }
    project(xa, x, cfg);
  }
  r.adversarial = std::move(xa);
  if (evaluate) evaluate_into(model, r.adversarial, y, r);
  return r;
}

template <Real T>
void copy_example(Tensor<T>& dst, const Tensor<T>& src, std::size_t i) {
  const std::size_t per = src.size() / src.dim(0);
  std::copy_n(src.data().begin() + static_cast<std::ptrdiff_t>(i * per), per,
              dst.data().begin() + static_cast<std::ptrdiff_t>(i * per));
}

}  // namespace detail

/// Projected gradient ascent on the cross entropy with restarts. Per example, keeps the
/// first successful restart, otherwise the one with the highest final loss.
template <Real T, Classifier<T> M>
AttackResult<T> pgd(const M& model, const Tensor<T>& x, std::span<const std::size_t> y, const AttackConfig& cfg,
                    Rng& rng) {
  cfg.validate();
  AttackResult<T> best = detail::pgd_restart(model, x, y, cfg, rng, true);
  for (std::size_t r = 1; r < cfg.restarts; ++r) {
    auto cur = detail::pgd_restart(model, x, y, cfg, rng, true);
    best.passes += cur.passes;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (best.success[i]) continue;
      if (cur.success[i] || cur.loss[i] > best.loss[i]) {
        detail::copy_example(best.adversarial, cur.adversarial, i);
        best.success[i] = cur.success[i];
        best.loss[i] = cur.loss[i];
      }
    }
  }
  return best;
}

/// Single signed step of size epsilon, or, with random_init, a uniform start followed by
/// one step of step_size.
template <Real T, Classifier<T> M>
AttackResult<T> fgsm(const M& model, const Tensor<T>& x, std::span<const std::size_t> y, const AttackConfig& cfg,
                     Rng& rng) {
  AttackConfig c = cfg;
  c.method = AttackMethod::fgsm;
  c.iterations = 1;
  c.direction = AttackDirection::sign;
  if (!c.random_init) c.step_size = c.epsilon;
  if (c.epsilon == 0 && c.step_size == 0) c.step_size = 1;
  return pgd(model, x, y, c, rng);
}

/// PGD stepping along the per-example L2-normalized gradient instead of its sign.
template <Real T, Classifier<T> M>
AttackResult<T> pgd_l2_direction(const M& model, const Tensor<T>& x, std::span<const std::size_t> y,
                                 const AttackConfig& cfg, Rng& rng) {
  AttackConfig c = cfg;
  c.direction = AttackDirection::l2;
  return pgd(model, x, y, c, rng);
}

/// Gradient-free search: each query sets a random square patch of one example to +-epsilon
/// (sign drawn per channel) and keeps it if the loss goes up. The patch side starts at a
/// quarter of the image side and halves every budget/5 queries.
template <Real T, Classifier<T> M>
AttackResult<T> random_search_attack(const M& model, const Tensor<T>& x, std::span<const std::size_t> y,
                                     const AttackConfig& cfg, Rng& rng) {
  cfg.validate();
  AttackResult<T> r;
  r.adversarial = x;
  detail::evaluate_into(model, r.adversarial, y, r);
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t budget = cfg.iterations;
  const std::size_t p0 = std::max<std::size_t>(1, std::min(h, w) / 4);
  const std::size_t period = std::max<std::size_t>(1, budget / 5);
  const T eps = static_cast<T>(cfg.epsilon), lo = static_cast<T>(cfg.clamp_lo), hi = static_cast<T>(cfg.clamp_hi);
  for (std::size_t q = 0; q < budget; ++q) {
    if (std::all_of(r.success.begin(), r.success.end(), [](auto s) { return s != 0; })) break;
    const std::size_t halvings = std::min<std::size_t>(q / period, 30);
    const std::size_t side = std::max<std::size_t>(1, p0 >> halvings);
    Tensor<T> proposal = r.adversarial;
    for (std::size_t n = 0; n < b; ++n) {
      if (r.success[n]) continue;
      const std::size_t i0 = rng.below(h - side + 1), j0 = rng.below(w - side + 1);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T s = rng.below(2) ? eps : -eps;
        for (std::size_t i = i0; i < i0 + side; ++i)
          for (std::size_t j = j0; j < j0 + side; ++j) {
            const std::size_t k = ((n * c + ch) * h + i) * w + j;
            proposal[k] = std::clamp(x[k] + s, lo, hi);
          }
      }
    }
    AttackResult<T> trial;
    detail::evaluate_into(model, proposal, y, trial);
    r.passes += trial.passes;
    double mean = 0;
    for (std::size_t n = 0; n < b; ++n) {
      if (!r.success[n] && (trial.success[n] || trial.loss[n] > r.loss[n])) {
        detail::copy_example(r.adversarial, proposal, n);
        r.loss[n] = trial.loss[n];
        r.success[n] = trial.success[n];
      }
      mean += r.loss[n];
    }
    r.loss_trace.push_back(mean / static_cast<double>(b));
  }
  return r;
}

template <Real T, Classifier<T> M>
AttackResult<T> run_attack(const M& model, const Tensor<T>& x, std::span<const std::size_t> y,
                           const AttackConfig& cfg, Rng& rng) {
  switch (cfg.method) {
    case AttackMethod::fgsm: return fgsm(model, x, y, cfg, rng);
    case AttackMethod::random_search: return random_search_attack(model, x, y, cfg, rng);
    case AttackMethod::pgd: break;
  }
  return pgd(model, x, y, cfg, rng);
}

/// Adversarial examples crafted on `source`, scored on `target`.
template <Real T, Classifier<T> S, Classifier<T> M>
AttackResult<T> transfer_attack(const S& source, const M& target, const Tensor<T>& x, std::span<const std::size_t> y,
                                const AttackConfig& cfg, Rng& rng) {
  if constexpr (requires { source.config().input_shape; target.config().input_shape; }) {
    if (source.config().input_shape != target.config().input_shape) {
      throw ShapeMismatch("transfer source input " + to_string(source.config().input_shape) + " vs target " +
                          to_string(target.config().input_shape));
    }
  }
  auto r = run_attack(source, x, y, cfg, rng);
  r.loss_trace.clear();
  detail::evaluate_into(target, r.adversarial, y, r);
  return r;
}

/// One row of the per-example attack report.
struct ExampleRecord {
  std::size_t index = 0;
  bool clean_correct = false;
  bool adv_correct = false;
  double loss_clean = 0;
  double loss_adv = 0;
  double grad_l1 = 0;  // L1 norm of the clean loss-input gradient
};

struct RobustEvaluation {
  double clean_accuracy = 0;
  double robust_accuracy = 0;
  double mean_loss_adv = 0;
  std::vector<ExampleRecord> examples;
  PassTally passes;

  /// 1 where the attack succeeded.
  std::vector<std::uint8_t> success_mask() const {
    std::vector<std::uint8_t> m;
    m.reserve(examples.size());
    for (const auto& e : examples) m.push_back(!e.adv_correct);
    return m;
  }
};

/// Evaluation options shared by the dataset-level drivers.
struct EvalOptions {
  std::uint64_t seed = 0;
  std::size_t batch_size = 100;
  std::size_t threads = 1;
  std::size_t limit = 0;  // evaluate only the first `limit` examples when non-zero
};

/// Attacks every example in fixed shards; shard s draws from Rng::derive(seed, s), so the
/// result does not depend on the thread count. `attack(x, y, rng)` returns an AttackResult.
template <Real T, Classifier<T> M, class AttackFn>
RobustEvaluation evaluate_attack(const M& model, const Dataset<T>& data, const EvalOptions& opt, AttackFn attack) {
  const std::size_t n = opt.limit ? std::min(opt.limit, data.size()) : data.size();
  if (n == 0) throw EmptyDataset("robust accuracy on an empty dataset");
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  const std::size_t shards = (n + bs - 1) / bs;
  std::vector<std::vector<ExampleRecord>> rows(shards);
  std::vector<PassTally> tallies(shards);
  parallel_for(shards, opt.threads, [&](std::size_t s) {
    const std::size_t begin = s * bs, count = std::min(bs, n - begin);
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
    const auto x = data.gather(idx);
    const auto y = data.gather_labels(idx);
    Rng rng = Rng::derive(opt.seed, s);
    const auto clean = loss_input_gradient(model, x, std::span<const std::size_t>(y));
    const auto l1 = per_example_l1(clean.gradient);
    const auto pred = argmax_rows(clean.logits);
    AttackResult<T> adv = attack(x, std::span<const std::size_t>(y), rng);
    tallies[s] = adv.passes;
    for (std::size_t i = 0; i < count; ++i) {
      rows[s].push_back({begin + i, pred[i] == y[i], !adv.success[i], clean.loss[i], adv.loss[i], l1[i]});
    }
  });
  RobustEvaluation ev;
  for (std::size_t s = 0; s < shards; ++s) {
    ev.examples.insert(ev.examples.end(), rows[s].begin(), rows[s].end());
    ev.passes += tallies[s];
  }
  for (const auto& e : ev.examples) {
    ev.clean_accuracy += e.clean_correct;
    ev.robust_accuracy += e.adv_correct;
    ev.mean_loss_adv += e.loss_adv;
  }
  ev.clean_accuracy /= static_cast<double>(n);
  ev.robust_accuracy /= static_cast<double>(n);
  ev.mean_loss_adv /= static_cast<double>(n);
  return ev;
}

/// Fraction of examples still classified correctly after the configured attack, plus the
/// per-example records.
template <Real T, Classifier<T> M>
RobustEvaluation robust_accuracy(const M& model, const Dataset<T>& data, const AttackConfig& cfg,
                                 const EvalOptions& opt = {}) {
  cfg.validate();
  return evaluate_attack(model, data, opt, [&](const Tensor<T>& x, std::span<const std::size_t> y, Rng& rng) {
    return run_attack(model, x, y, cfg, rng);
  });
}

template <Real T, Classifier<T> S, Classifier<T> M>
RobustEvaluation transfer_robust_accuracy(const S& source, const M& target, const Dataset<T>& data,
                                          const AttackConfig& cfg, const EvalOptions& opt = {}) {
  cfg.validate();
  return evaluate_attack(target, data, opt, [&](const Tensor<T>& x, std::span<const std::size_t> y, Rng& rng) {
    return transfer_attack(source, target, x, y, cfg, rng);
  });
}

struct SweepPoint {
  double x = 0;  // epsilon, iteration count, or interpolation coefficient
  double clean_accuracy = 0;
  double robust_accuracy = 0;
  double mean_loss = 0;
};

/// Robust accuracy per budget. The step size scales with epsilon relative to the base
/// config; epsilon 0 is a plain clean evaluation.
template <Real T, Classifier<T> M>
std::vector<SweepPoint> epsilon_sweep(const M& model, const Dataset<T>& data, const AttackConfig& base,
                                      std::span<const double> eps_grid, const EvalOptions& opt = {}) {
  if (!std::is_sorted(eps_grid.begin(), eps_grid.end())) throw Error("epsilon grid must be sorted ascending");
  std::vector<SweepPoint> out;
  for (double eps : eps_grid) {
    AttackConfig c = base;
    c.epsilon = eps;
    c.step_size = base.epsilon > 0 ? base.step_size * eps / base.epsilon : eps / 4.0;
    if (eps == 0) {
      c.iterations = 0;
      c.step_size = 1;
      c.method = AttackMethod::pgd;
      c.restarts = 1;
      c.random_init = false;
    }
    const auto ev = robust_accuracy(model, data, c, opt);
    out.push_back({eps, ev.clean_accuracy, ev.robust_accuracy, ev.mean_loss_adv});
  }
  return out;
}

/// Robust accuracy and mean adversarial loss per iteration count at a fixed budget.
template <Real T, Classifier<T> M>
std::vector<SweepPoint> iteration_sweep(const M& model, const Dataset<T>& data, const AttackConfig& base,
                                        std::span<const std::size_t> iterations, const EvalOptions& opt = {}) {
  std::vector<SweepPoint> out;
  for (auto k : iterations) {
    AttackConfig c = base;
    c.iterations = k;
    const auto ev = robust_accuracy(model, data, c, opt);
    out.push_back({static_cast<double>(k), ev.clean_accuracy, ev.robust_accuracy, ev.mean_loss_adv});
  }
  return out;
}

inline std::string attack_csv(const RobustEvaluation& ev) {
  std::ostringstream os;
  os.precision(17);
  os << "index,clean_correct,adv_correct,loss_clean,loss_adv,grad_l1\n";
  for (const auto& e : ev.examples) {
    os << e.index << ',' << e.clean_correct << ',' << e.adv_correct << ',' << e.loss_clean << ',' << e.loss_adv << ','
       << e.grad_l1 << '\n';
  }
  return os.str();
}

inline std::string sweep_csv(std::string_view grid_column, const std::vector<SweepPoint>& pts) {
  std::ostringstream os;
  os.precision(17);
  os << grid_column << ",clean_accuracy,robust_accuracy,mean_loss\n";
  for (const auto& p : pts) os << p.x << ',' << p.clean_accuracy << ',' << p.robust_accuracy << ',' << p.mean_loss << '\n';
  return os.str();
}

/// Stores adversarial inputs in the checkpoint tensor format under the name "adversarial".
template <Real T>
void save_adversarial(const std::string& path, const Tensor<T>& adversarial) {
  write_file(path, encode_archive<T>("{\"kind\":\"adversarial\"}", {{"adversarial", adversarial}}));
}

}  // namespace robustgrad
