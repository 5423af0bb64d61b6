#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "robustgrad/attacks.hpp"
#include "robustgrad/objectives.hpp"

namespace robustgrad {

enum class ScheduleKind { cosine, constant };

/// Learning rate schedule in fractional epochs: linear warmup from warmup_lr to base_lr,
/// then cosine decay to min_lr at `epochs`.
struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::cosine;
  double base_lr = 1e-3;
  double warmup_lr = 1e-5;
  double min_lr = 1e-5;
  double warmup_epochs = 0;
  double epochs = 10;

  void validate() const {
    if (!(warmup_lr <= base_lr)) throw Error("warmup_lr must not exceed the base learning rate");
    if (!(warmup_epochs >= 0)) throw Error("warmup_epochs must be >= 0");
  }
};

inline double cosine_warmup_lr(double epoch, const ScheduleConfig& s) {
  if (epoch < 0) throw Error("schedule position must be >= 0");
  if (s.kind == ScheduleKind::constant) return s.base_lr;
  if (epoch < s.warmup_epochs) return s.warmup_lr + (s.base_lr - s.warmup_lr) * epoch / s.warmup_epochs;
  const double span = s.epochs - s.warmup_epochs;
  const double progress = span > 0 ? std::min(1.0, (epoch - s.warmup_epochs) / span) : 1.0;
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1 + std::cos(std::numbers::pi * progress));
}

/// target * min(1, epoch / warmup_epochs); the full target when warmup_epochs is 0.
inline double regularizer_warmup(double epoch, double warmup_epochs, double target) {
  if (warmup_epochs <= 0) return target;
  return target * std::clamp(epoch / warmup_epochs, 0.0, 1.0);
}

enum class OptimizerKind { adamw, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double momentum = 0.9;  // sgd only
};

template <Real T>
struct OptimizerState {
  std::vector<Tensor<T>> m, v;  // first/second moments, or momentum buffers for sgd
  std::size_t step = 0;
};

/// One AdamW step. Weight decay is decoupled and only touches tensors of rank >= 2.
template <Real T>
void adamw_step(std::vector<NamedTensor<T>>& params, const std::vector<Tensor<T>>& grads, OptimizerState<T>& st,
                const OptimizerConfig& h, double lr) {
  if (grads.size() != params.size()) throw ShapeMismatch("gradient count vs parameter count");
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.value.shape(), T(0));
      st.v.emplace_back(p.value.shape(), T(0));
    }
  }
  ++st.step;
  const double bc1 = 1 - std::pow(h.beta1, static_cast<double>(st.step));
  const double bc2 = 1 - std::pow(h.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].value;
    const auto& g = grads[k];
    if (g.shape() != p.shape()) throw ShapeMismatch("gradient shape for " + params[k].name);
    const double decay = p.rank() >= 2 ? lr * h.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double m = h.beta1 * st.m[k][i] + (1 - h.beta1) * gi;
      const double v = h.beta2 * st.v[k][i] + (1 - h.beta2) * gi * gi;
      st.m[k][i] = static_cast<T>(m);
      st.v[k][i] = static_cast<T>(v);
      const double upd = (m / bc1) / (std::sqrt(v / bc2) + h.eps);
      p[i] = static_cast<T>(p[i] - decay * p[i] - lr * upd);
    }
  }
}

/// SGD with heavy-ball momentum and coupled weight decay on rank >= 2 tensors.
template <Real T>
void sgd_step(std::vector<NamedTensor<T>>& params, const std::vector<Tensor<T>>& grads, OptimizerState<T>& st,
              const OptimizerConfig& h, double lr) {
  if (grads.size() != params.size()) throw ShapeMismatch("gradient count vs parameter count");
  if (st.m.empty()) {
    for (const auto& p : params) st.m.emplace_back(p.value.shape(), T(0));
  }
  ++st.step;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].value;
    const double wd = p.rank() >= 2 ? h.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = grads[k][i] + wd * p[i];
      const double buf = h.momentum * st.m[k][i] + g;
      st.m[k][i] = static_cast<T>(buf);
      p[i] = static_cast<T>(p[i] - lr * buf);
    }
  }
}

/// ema <- decay * ema + (1 - decay) * params, tensor by tensor.
template <Real T>
void ema_update(std::vector<NamedTensor<T>>& ema, const std::vector<NamedTensor<T>>& params, double decay) {
  if (ema.size() != params.size()) throw ShapeMismatch("ema parameter count");
  for (std::size_t k = 0; k < ema.size(); ++k) {
    if (ema[k].value.shape() != params[k].value.shape()) throw ShapeMismatch("ema shape for " + params[k].name);
    for (std::size_t i = 0; i < ema[k].value.size(); ++i) {
      ema[k].value[i] = static_cast<T>(decay * ema[k].value[i] + (1 - decay) * params[k].value[i]);
    }
  }
}

/// Thresholds for flagging catastrophic overfitting: PGD accuracy falls below
/// (1 - relative_drop) of its value in one of the previous `window` epochs, while FGSM
/// accuracy stays at least `fgsm_keep` of that epoch's value. Epochs whose earlier PGD
/// accuracy is at or below `pgd_floor` cannot trigger.
struct OverfitDetectorConfig {
  std::size_t window = 3;
  double relative_drop = 0.5;
  double fgsm_keep = 0.9;
  double pgd_floor = 0.05;
};

struct TrainLogRow {
  std::size_t epoch = 0;
  double clean_accuracy = 0;
  double robust_accuracy = 0;  // PGD
  double fgsm_accuracy = 0;
  double mean_loss = 0;
  double mean_ce = 0;
  double mean_grad_l1 = 0;  // clean loss-input gradient on the evaluation set
  double lr = 0;
  double reg_weight = 0;
  std::size_t skipped = 0;
  bool overfit = false;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  PassTally passes_per_batch;
  PassTally passes_total;
  double wall_seconds = 0;  // not part of csv(), which must be reproducible
  std::optional<std::string> aborted;

  std::string csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,clean_accuracy,robust_accuracy,fgsm_accuracy,mean_loss,mean_ce,mean_grad_l1,lr,reg_weight,skipped,"
          "overfit\n";
    for (const auto& r : rows) {
      os << r.epoch << ',' << r.clean_accuracy << ',' << r.robust_accuracy << ',' << r.fgsm_accuracy << ','
         << r.mean_loss << ',' << r.mean_ce << ',' << r.mean_grad_l1 << ',' << r.lr << ',' << r.reg_weight << ','
         << r.skipped << ',' << r.overfit << '\n';
    }
    return os.str();
  }
};

/// Per-epoch overfitting flags for a sequence of (PGD accuracy, FGSM accuracy) rows.
inline std::vector<bool> detect_catastrophic_overfitting(const std::vector<TrainLogRow>& rows,
                                                         const OverfitDetectorConfig& cfg = {}) {
  std::vector<bool> flags(rows.size(), false);
  for (std::size_t e = 1; e < rows.size(); ++e) {
    const std::size_t first = e > cfg.window ? e - cfg.window : 0;
    for (std::size_t j = first; j < e; ++j) {
      const auto& prev = rows[j];
      const auto& cur = rows[e];
      if (prev.robust_accuracy > cfg.pgd_floor && cur.robust_accuracy < (1 - cfg.relative_drop) * prev.robust_accuracy &&
          cur.fgsm_accuracy >= cfg.fgsm_keep * prev.fgsm_accuracy) {
        flags[e] = true;
        break;
      }
    }
  }
  return flags;
}

struct TrainingConfig {
  ObjectiveConfig objective;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  double ema_decay = 0.0;
  double warmup_reg_epochs = 0;  // warms up the regularizer weight, or the attack step
  bool train_norm = false;       // norm layers use batch statistics during training
  std::uint64_t seed = 0;
  AttackConfig eval_attack = AttackConfig::pgd(4.0 / 255.0, 10);
  std::size_t eval_examples = 0;  // 0 means the whole validation set
  bool evaluate_each_epoch = true;
  OverfitDetectorConfig detector;
  std::size_t threads = 1;

  void validate() const {
    if (batch_size == 0) throw Error("batch_size must be > 0");
    if (!(ema_decay >= 0 && ema_decay < 1)) throw Error("ema decay must be in [0,1)");
    if (warmup_reg_epochs > static_cast<double>(epochs)) throw Error("warmup_reg_epochs exceeds epochs");
    schedule.validate();
    eval_attack.validate();
  }
};

template <Real T>
struct TrainResult {
  Network<T> net;
  Network<T> ema;
  TrainLog log;
};

/// Clean, PGD and FGSM accuracy of `net` on `data` plus the mean clean gradient L1 norm.
template <Real T>
TrainLogRow evaluate_epoch(const Network<T>& net, const Dataset<T>& data, const TrainingConfig& cfg,
                           std::uint64_t seed) {
  TrainLogRow row;
  EvalOptions opt;
  opt.seed = seed;
  opt.threads = cfg.threads;
  opt.limit = cfg.eval_examples;
  const auto pgd_ev = robust_accuracy(net, data, cfg.eval_attack, opt);
  const auto fgsm_ev = robust_accuracy(net, data, AttackConfig::fgsm(cfg.eval_attack.epsilon), opt);
  row.clean_accuracy = pgd_ev.clean_accuracy;
  row.robust_accuracy = pgd_ev.robust_accuracy;
  row.fgsm_accuracy = fgsm_ev.robust_accuracy;
  double l1 = 0;
  for (const auto& e : pgd_ev.examples) l1 += e.grad_l1;
  row.mean_grad_l1 = l1 / static_cast<double>(pgd_ev.examples.size());
  return row;
}

/// Objective config with the regularizer (or attack step) warmed up to fractional epoch t.
inline ObjectiveConfig warmed_objective(const ObjectiveConfig& base, double t, double warmup, double& reg_weight) {
  ObjectiveConfig c = base;
  switch (c.kind) {
    case ObjectiveKind::gradnorm:
      c.gradnorm.lambda_gn = reg_weight = regularizer_warmup(t, warmup, base.gradnorm.lambda_gn);
      break;
    case ObjectiveKind::edgereg: c.edge_weight = reg_weight = regularizer_warmup(t, warmup, base.edge_weight); break;
    case ObjectiveKind::advtrain:
    case ObjectiveKind::fgsm_train:
      if (warmup > 0) {
        const double target = c.kind == ObjectiveKind::fgsm_train && !base.adv.attack.random_init
                                  ? base.adv.attack.epsilon
                                  : base.adv.attack.step_size;
        reg_weight = regularizer_warmup(t, warmup, target);
        c.adv.attack.step_size = std::max(reg_weight, 1e-12);
        if (c.kind == ObjectiveKind::fgsm_train && !base.adv.attack.random_init) {
          c.adv.attack.epsilon = c.adv.attack.step_size;
        }
      } else {
        reg_weight = base.adv.attack.step_size;
      }
      break;
    case ObjectiveKind::natural: reg_weight = 0; break;
  }
  return c;
}

/// Runs the epoch loop. A non-finite loss stops training; the returned networks are the
/// state before the offending batch and `log.aborted` says why.
template <Real T>
TrainResult<T> train(const Network<T>& init, const Dataset<T>& train_set, const Dataset<T>& val_set,
                     const TrainingConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  TrainResult<T> res{init, init, {}};
  Network<T>& net = res.net;
  if (cfg.epochs == 0) return res;
  if (train_set.empty()) throw EmptyDataset("training set is empty");
  OptimizerState<T> opt_state;
  const std::size_t n = train_set.size();
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  ScheduleConfig sched = cfg.schedule;
  sched.epochs = static_cast<double>(cfg.epochs);
  bool first_batch = true;

  for (std::size_t epoch = 0; epoch < cfg.epochs && !res.log.aborted; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffle_rng = Rng::derive(cfg.seed, 2 * epoch);
    shuffle_rng.shuffle(order.begin(), order.end());
    Rng loss_rng = Rng::derive(cfg.seed, 2 * epoch + 1);
    double loss_sum = 0, ce_sum = 0, lr = 0, reg = 0;
    std::size_t skipped = 0;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const double t = static_cast<double>(epoch) + static_cast<double>(bi) / static_cast<double>(batches);
      lr = cosine_warmup_lr(t, sched);
      const auto obj = warmed_objective(cfg.objective, t, cfg.warmup_reg_epochs, reg);
      const std::size_t begin = bi * cfg.batch_size, count = std::min(cfg.batch_size, n - begin);
      const std::span<const std::size_t> idx(order.data() + begin, count);
      const auto x = train_set.gather(idx);
      const auto y = train_set.gather_labels(idx);

      net.set_norm_mode(cfg.train_norm ? NormMode::train : NormMode::eval);
      Tape<T> tape;
      const auto params = net.bind(tape, true);
      NormCapture<T> capture;
      auto terms = objective_loss(net, tape, std::span<const Var<T>>(params), x, std::span<const std::size_t>(y), obj,
                                  loss_rng, cfg.train_norm ? &capture : nullptr);
      net.set_norm_mode(NormMode::eval);
      const double lv = terms.loss.item();
      if (!std::isfinite(lv)) {
        res.log.aborted = "non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(bi);
        break;
      }
      const auto gv = tape.gradient(terms.loss, std::span<const Var<T>>(params));
      std::vector<Tensor<T>> grads;
      grads.reserve(gv.size());
      for (const auto& g : gv) grads.push_back(g.value());
      const PassTally batch_passes = tape.tally() + terms.extra;
      if (first_batch) res.log.passes_per_batch = batch_passes;
      first_batch = false;
      res.log.passes_total += batch_passes;
      bool finite = true;
      for (const auto& g : grads) finite = finite && g.all_finite();
      if (!finite) {
        res.log.aborted = "non-finite gradient at epoch " + std::to_string(epoch) + " batch " + std::to_string(bi);
        break;
      }
      if (cfg.optimizer.kind == OptimizerKind::adamw) {
        adamw_step(net.parameters(), grads, opt_state, cfg.optimizer, lr);
      } else {
        sgd_step(net.parameters(), grads, opt_state, cfg.optimizer, lr);
      }
      if (cfg.train_norm) net.update_running_stats(capture);
      if (cfg.ema_decay > 0) {
        ema_update(res.ema.parameters(), net.parameters(), cfg.ema_decay);
        res.ema.buffers() = net.buffers();
      } else {
        res.ema = net;
      }
      loss_sum += lv * static_cast<double>(count);
      ce_sum += terms.ce * static_cast<double>(count);
      skipped += terms.skipped;
    }
    if (res.log.aborted) break;
    TrainLogRow row;
    if (cfg.evaluate_each_epoch && !val_set.empty()) row = evaluate_epoch(res.ema, val_set, cfg, cfg.seed + 1000003 * (epoch + 1));
    row.epoch = epoch;
    row.mean_loss = loss_sum / static_cast<double>(n);
    row.mean_ce = ce_sum / static_cast<double>(n);
    row.lr = lr;
    row.reg_weight = reg;
    row.skipped = skipped;
    res.log.rows.push_back(row);
  }
  const auto flags = detect_catastrophic_overfitting(res.log.rows, cfg.detector);
  for (std::size_t i = 0; i < flags.size(); ++i) res.log.rows[i].overfit = flags[i];
  res.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

struct LambdaPoint {
  double lambda = 0;
  double clean_accuracy = 0;
  double robust_accuracy = 0;
};

/// Trains from `init` once per lambda with (2 - lambda) * CE + lambda * penalty and reports
/// final clean and robust accuracy on `val_set`. Lambda 0 is plain cross-entropy training.
template <Real T>
std::vector<LambdaPoint> lambda_sweep(const Network<T>& init, const Dataset<T>& train_set, const Dataset<T>& val_set,
                                      const TrainingConfig& base, std::span<const double> lambdas,
                                      std::vector<TrainResult<T>>* runs = nullptr) {
  std::vector<LambdaPoint> out;
  for (double lam : lambdas) {
    if (!(lam >= 0 && lam <= 2)) throw Error("lambda must be in [0,2]");
    TrainingConfig cfg = base;
    if (lam == 0) {
      cfg.objective.kind = ObjectiveKind::natural;
    } else {
      cfg.objective.kind = ObjectiveKind::gradnorm;
      cfg.objective.gradnorm.lambda_ce = 2 - lam;
      cfg.objective.gradnorm.lambda_gn = lam;
    }
    cfg.evaluate_each_epoch = false;
    auto r = train(init, train_set, val_set, cfg);
    const auto row = evaluate_epoch(r.ema, val_set, cfg, cfg.seed + 7);
    out.push_back({lam, row.clean_accuracy, row.robust_accuracy});
    if (runs) runs->push_back(std::move(r));
  }
  return out;
}

}  // namespace robustgrad
