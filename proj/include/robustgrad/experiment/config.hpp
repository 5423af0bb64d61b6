#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "robustgrad/data/cifar.hpp"
#include "robustgrad/data/idx.hpp"
#include "robustgrad/data/synthetic.hpp"
#include "robustgrad/diagnostics/report.hpp"
#include "robustgrad/training.hpp"

namespace robustgrad {

struct DataSection {
  std::string source = "synthetic";  // synthetic, idx, cifar, or auto
  SyntheticSpec synthetic;
  std::size_t val_samples = 500;     // synthetic only; idx/cifar use their test files
  std::string dir;                   // falls back to $ROBUSTGRAD_DATA_DIR
  std::string train_images = "train-images-idx3-ubyte";
  std::string train_labels = "train-labels-idx1-ubyte";
  std::string test_images = "t10k-images-idx3-ubyte";
  std::string test_labels = "t10k-labels-idx1-ubyte";
  std::vector<std::string> cifar_train = {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                                          "data_batch_4.bin", "data_batch_5.bin"};
  std::string cifar_test = "test_batch.bin";
  std::size_t train_limit = 0;
  std::size_t test_limit = 0;
  std::vector<double> mean;  // empty means identity normalization
  std::vector<double> std;
};

struct ModelSection {
  std::string arch = "cnn-small";
  ActivationKind activation = ActivationKind::gelu;
};

struct AttackSection {
  AttackConfig attack = AttackConfig::pgd(0.1, 40);
  std::vector<double> eps_grid;
  std::vector<std::size_t> iteration_grid;
  std::string transfer_source;  // checkpoint of a source model
  std::size_t examples = 0;
  std::size_t batch_size = 100;
  bool save_adversarial = false;
};

inline const std::vector<std::string>& diagnostic_names() {
  static const std::vector<std::string> names{"gradients", "edges", "geometry", "linearity", "direction", "saliency"};
  return names;
}

struct DiagnosticsSection {
  std::set<std::string> which{"gradients", "edges", "geometry", "linearity"};
  DiagnosticsConfig cfg;
  std::size_t examples = 200;
  std::size_t batch_size = 50;
  std::size_t saliency_examples = 8;
  double saliency_clip = 0.95;
};

struct OutputSection {
  std::string dir = "runs/default";
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string preset;
  DataSection data;
  ModelSection model;
  TrainingConfig training;
  std::vector<double> lambda_grid;
  AttackSection attack;
  DiagnosticsSection diagnostics;
  OutputSection output;
  std::string canonical;  // sorted JSON of the merged document, the input to the config hash
};

namespace detail {

inline int line_of(const YAML::Node& n) { return n.Mark().is_null() ? 0 : n.Mark().line + 1; }

template <class V>
V scalar_as(const YAML::Node& n, const std::string& key, const char* what) {
  try {
    if (!n.IsScalar()) throw ConfigError(key, line_of(n), std::string("expected ") + what);
    return n.as<V>();
  } catch (const YAML::Exception&) {
    throw ConfigError(key, line_of(n), std::string("expected ") + what);
  }
}

inline double as_double(const YAML::Node& n, const std::string& key) { return scalar_as<double>(n, key, "a number"); }

inline std::size_t as_count(const YAML::Node& n, const std::string& key) {
  const auto v = scalar_as<long long>(n, key, "a non-negative integer");
  if (v < 0) throw ConfigError(key, line_of(n), "expected a non-negative integer");
  return static_cast<std::size_t>(v);
}

inline bool as_bool(const YAML::Node& n, const std::string& key) { return scalar_as<bool>(n, key, "true or false"); }

inline std::string as_string(const YAML::Node& n, const std::string& key) {
  return scalar_as<std::string>(n, key, "a string");
}

template <class F>
auto as_list(const YAML::Node& n, const std::string& key, F&& one) {
  using V = decltype(one(n, key));
  std::vector<V> out;
  if (n.IsScalar()) {
    out.push_back(one(n, key));
  } else if (n.IsSequence()) {
    for (const auto& e : n) out.push_back(one(e, key));
  } else if (!n.IsNull()) {
    throw ConfigError(key, line_of(n), "expected a list");
  }
  return out;
}

template <class E, class P>
E as_enum(const YAML::Node& n, const std::string& key, P&& parse, const char* choices) {
  const auto s = as_string(n, key);
  const auto v = parse(s);
  if (!v) throw ConfigError(key, line_of(n), "unknown value '" + s + "', expected one of " + choices);
  return *v;
}

/// Recipe keys from the reference training setup that this library deliberately omits.
inline const std::set<std::string>& out_of_scope_keys() {
  static const std::set<std::string> keys{
      "aa", "color_jitter", "no_aug", "aug_repeats", "aug_splits", "jsd_loss", "reprob", "remode", "recount",
      "resplit", "mixup", "cutmix", "cutmix_minmax", "mixup_prob", "mixup_switch_prob", "mixup_mode",
      "mixup_off_epoch", "train_interpolation", "drop", "drop_path", "drop_block", "clip_grad", "clip_mode",
      "layer_decay", "epoch_repeats", "start_epoch", "decay_epochs", "cooldown_epochs", "patience_epochs",
      "decay_rate", "model_ema_force_cpu"};
  return keys;
}

using Setter = std::function<void(ExperimentConfig&, const YAML::Node&, const std::string&)>;
using KeyTable = std::map<std::string, Setter>;

inline AttackConfig& objective_attack(ExperimentConfig& c) { return c.training.objective.adv.attack; }

inline const std::map<std::string, KeyTable>& key_tables() {
  static const std::map<std::string, KeyTable> tables = [] {
    std::map<std::string, KeyTable> t;
    auto& data = t["data"];
    data["source"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      const auto s = as_string(n, k);
      if (s != "synthetic" && s != "idx" && s != "cifar" && s != "auto") {
        throw ConfigError(k, line_of(n), "unknown value '" + s + "', expected one of synthetic, idx, cifar, auto");
      }
      c.data.source = s;
    };
    data["kind"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      c.data.synthetic.kind = as_enum<SyntheticKind>(n, k, parse_synthetic_kind, "edge-shapes, gaussian-blobs");
    };
    data["num_classes"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.synthetic.num_classes = as_count(n, k); };
    data["image_size"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.synthetic.image_size = as_count(n, k); };
    data["samples"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.synthetic.samples = as_count(n, k); };
    data["val_samples"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.val_samples = as_count(n, k); };
    data["seed"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.synthetic.seed = as_count(n, k); };
    data["noise"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.synthetic.noise = static_cast<int>(as_count(n, k)); };
    data["stroke_min"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.synthetic.stroke_min = static_cast<int>(as_count(n, k)); };
    data["stroke_max"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.synthetic.stroke_max = static_cast<int>(as_count(n, k)); };
    data["dir"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.dir = as_string(n, k); };
    data["train_images"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.train_images = as_string(n, k); };
    data["train_labels"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.train_labels = as_string(n, k); };
    data["test_images"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.test_images = as_string(n, k); };
    data["test_labels"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.test_labels = as_string(n, k); };
    data["cifar_train"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.cifar_train = as_list(n, k, as_string); };
    data["cifar_test"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.cifar_test = as_string(n, k); };
    data["train_limit"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.train_limit = as_count(n, k); };
    data["test_limit"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.test_limit = as_count(n, k); };
    data["mean"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.mean = as_list(n, k, as_double); };
    data["std"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.data.std = as_list(n, k, as_double); };

    auto& model = t["model"];
    model["arch"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      const auto s = as_string(n, k);
      if (!network_preset(s, ActivationKind::gelu, {1, 8, 8}, 2)) {
        throw ConfigError(k, line_of(n), "unknown architecture '" + s + "', expected one of linear, mlp-2x256, cnn-small, cnn-small-bn");
      }
      c.model.arch = s;
    };
    model["activation"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      c.model.activation = as_enum<ActivationKind>(n, k, parse_activation, "relu, gelu, silu, softplus");
    };
    model["train_norm"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.train_norm = as_bool(n, k); };

    auto& obj = t["objective"];
    obj["kind"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      c.training.objective.kind =
          as_enum<ObjectiveKind>(n, k, parse_objective, "natural, gradnorm, edgereg, advtrain, fgsm-train");
    };
    obj["ce_weight"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      c.training.objective.gradnorm.lambda_ce = c.training.objective.edge_ce_weight = as_double(n, k);
    };
    obj["gradnorm_weight"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.objective.gradnorm.lambda_gn = as_double(n, k); };
    obj["edge_weight"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.objective.edge_weight = as_double(n, k); };
    obj["sigma"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.objective.gradnorm.sigma = as_double(n, k); };
    obj["channel_weights"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      c.training.objective.gradnorm.channel_weights = as_list(n, k, as_double);
    };
    obj["input_noise"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      const auto s = as_string(n, k);
      auto& noise = c.training.objective.gradnorm.input_noise;
      if (s == "none") {
        noise = NoNoise{};
      } else if (s == "gaussian") {
        noise = GaussianNoise{std::holds_alternative<GaussianNoise>(noise) ? std::get<GaussianNoise>(noise).std : 0.0};
      } else if (s == "adversarial") {
        noise = AdversarialNoise{objective_attack(c)};
      } else {
        throw ConfigError(k, line_of(n), "unknown value '" + s + "', expected one of none, gaussian, adversarial");
      }
    };
    obj["noise_std"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      c.training.objective.gradnorm.input_noise = GaussianNoise{as_double(n, k)};
    };
    obj["smoothing"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      const double s = as_double(n, k);
      c.training.objective.label_smoothing = c.training.objective.gradnorm.label_smoothing =
          c.training.objective.adv.label_smoothing = s;
    };
    obj["attack_eps"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      const double e = as_double(n, k);
      c.training.objective.gradnorm.epsilon = e;
      objective_attack(c).epsilon = e;
    };
    obj["attack_it"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { objective_attack(c).iterations = as_count(n, k); };
    obj["attack_step"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { objective_attack(c).step_size = as_double(n, k); };
    obj["attack_random_init"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { objective_attack(c).random_init = as_bool(n, k); };
    obj["edge_temperature"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.objective.edge.temperature = as_double(n, k); };
    obj["edge_filter"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      c.training.objective.edge.edge_filter = as_enum<EdgeFilter>(n, k, parse_edge_filter, "sobel, gaussian-derivative[:sigma]");
    };
    obj["edge_clamp_floor"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.objective.edge.clamp_floor = as_double(n, k); };
    obj["warmup_reg_epochs"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.warmup_reg_epochs = as_double(n, k); };
    obj["lambda_grid"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.lambda_grid = as_list(n, k, as_double); };

    auto& sched = t["schedule"];
    sched["opt"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      const auto s = as_string(n, k);
      if (s == "adamw") {
        c.training.optimizer.kind = OptimizerKind::adamw;
      } else if (s == "sgd") {
        c.training.optimizer.kind = OptimizerKind::sgd;
      } else {
        throw ConfigError(k, line_of(n), "unknown value '" + s + "', expected one of adamw, sgd");
      }
    };
    sched["opt_eps"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.optimizer.eps = as_double(n, k); };
    sched["opt_betas"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      if (n.IsNull()) return;
      const auto b = as_list(n, k, as_double);
      if (b.size() != 2) throw ConfigError(k, line_of(n), "expected two betas");
      c.training.optimizer.beta1 = b[0];
      c.training.optimizer.beta2 = b[1];
    };
    sched["momentum"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.optimizer.momentum = as_double(n, k); };
    sched["weight_decay"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.optimizer.weight_decay = as_double(n, k); };
    sched["epochs"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.epochs = as_count(n, k); };
    sched["sched"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      const auto s = as_string(n, k);
      if (s == "cosine") {
        c.training.schedule.kind = ScheduleKind::cosine;
      } else if (s == "constant") {
        c.training.schedule.kind = ScheduleKind::constant;
      } else {
        throw ConfigError(k, line_of(n), "unknown value '" + s + "', expected one of cosine, constant");
      }
    };
    sched["lrb"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.schedule.base_lr = as_double(n, k); };
    sched["warmup_lr"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.schedule.warmup_lr = as_double(n, k); };
    sched["min_lr"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.schedule.min_lr = as_double(n, k); };
    sched["warmup_epochs"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.schedule.warmup_epochs = as_double(n, k); };
    sched["batch_size"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.batch_size = as_count(n, k); };
    sched["model_ema"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      if (!as_bool(n, k)) c.training.ema_decay = 0;
    };
    sched["model_ema_decay"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.ema_decay = as_double(n, k); };
    sched["eval_eps"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      c.training.eval_attack.epsilon = as_double(n, k);
      c.training.eval_attack.step_size = c.training.eval_attack.epsilon / 4;
    };
    sched["eval_it"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.eval_attack.iterations = as_count(n, k); };
    sched["eval_examples"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.eval_examples = as_count(n, k); };
    sched["detector_window"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.detector.window = as_count(n, k); };
    sched["detector_drop"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.detector.relative_drop = as_double(n, k); };
    sched["detector_fgsm_keep"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.detector.fgsm_keep = as_double(n, k); };
    sched["detector_pgd_floor"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.training.detector.pgd_floor = as_double(n, k); };

    auto& atk = t["attack"];
    atk["method"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      c.attack.attack.method = as_enum<AttackMethod>(n, k, parse_attack_method, "pgd, fgsm, random-search");
      if (c.attack.attack.method == AttackMethod::fgsm) c.attack.attack.iterations = 1;
    };
    atk["eps"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.attack.attack.epsilon = as_double(n, k); };
    atk["step"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.attack.attack.step_size = as_double(n, k); };
    atk["iterations"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.attack.attack.iterations = as_count(n, k); };
    atk["restarts"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.attack.attack.restarts = as_count(n, k); };
    atk["random_init"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.attack.attack.random_init = as_bool(n, k); };
    atk["direction"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      const auto s = as_string(n, k);
      if (s == "sign") {
        c.attack.attack.direction = AttackDirection::sign;
      } else if (s == "l2") {
        c.attack.attack.direction = AttackDirection::l2;
      } else {
        throw ConfigError(k, line_of(n), "unknown value '" + s + "', expected one of sign, l2");
      }
    };
    atk["eps_grid"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.attack.eps_grid = as_list(n, k, as_double); };
    atk["iteration_grid"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.attack.iteration_grid = as_list(n, k, as_count); };
    atk["transfer_source"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.attack.transfer_source = as_string(n, k); };
    atk["examples"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.attack.examples = as_count(n, k); };
    atk["batch_size"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.attack.batch_size = as_count(n, k); };
    atk["save_adversarial"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.attack.save_adversarial = as_bool(n, k); };

    auto& diag = t["diagnostics"];
    diag["which"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      std::set<std::string> w;
      for (const auto& s : as_list(n, k, as_string)) {
        if (s == "all") {
          w.insert(diagnostic_names().begin(), diagnostic_names().end());
        } else if (std::find(diagnostic_names().begin(), diagnostic_names().end(), s) != diagnostic_names().end()) {
          w.insert(s);
        } else {
          throw ConfigError(k, line_of(n), "unknown diagnostic '" + s + "'");
        }
      }
      c.diagnostics.which = std::move(w);
    };
    diag["examples"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.examples = as_count(n, k); };
    diag["batch_size"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.batch_size = as_count(n, k); };
    diag["attack_eps"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      auto& a = c.diagnostics.cfg.attack;
      a.epsilon = as_double(n, k);
      a.step_size = a.epsilon / 4;
    };
    diag["attack_it"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.cfg.attack.iterations = as_count(n, k); };
    diag["power_iters"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.cfg.power.iterations = as_count(n, k); };
    diag["power_init"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      c.diagnostics.cfg.power.init = as_enum<PowerInit>(n, k, parse_power_init, "gradient, random");
    };
    diag["power_tol"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.cfg.power.tolerance = as_double(n, k); };
    diag["linearity_samples"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.cfg.probe.samples_per_example = as_count(n, k); };
    diag["linearity_eps"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.cfg.probe.epsilon = as_double(n, k); };
    diag["direction_grid"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.cfg.direction_grid = as_list(n, k, as_double); };
    diag["direction_eps"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      auto& a = c.diagnostics.cfg.direction_attack;
      a.epsilon = as_double(n, k);
      a.step_size = a.epsilon / 4;
    };
    diag["direction_it"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.cfg.direction_attack.iterations = as_count(n, k); };
    diag["edge_filter"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      c.diagnostics.cfg.edge.filter = as_enum<EdgeFilter>(n, k, parse_edge_filter, "sobel, gaussian-derivative[:sigma]");
    };
    diag["edge_clamp_floor"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.cfg.edge.clamp_floor = as_double(n, k); };
    diag["hist_lo"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.cfg.histogram.lo_exp = scalar_as<int>(n, k, "an integer"); };
    diag["hist_hi"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.cfg.histogram.hi_exp = scalar_as<int>(n, k, "an integer"); };
    diag["hist_bins_per_decade"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) {
      c.diagnostics.cfg.histogram.bins_per_decade = static_cast<int>(as_count(n, k));
    };
    diag["saliency_examples"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.saliency_examples = as_count(n, k); };
    diag["saliency_clip"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.diagnostics.saliency_clip = as_double(n, k); };

    t["output"]["dir"] = [](ExperimentConfig& c, const YAML::Node& n, const std::string& k) { c.output.dir = as_string(n, k); };
    return t;
  }();
  return tables;
}

/// Built-in configurations, as YAML documents.
inline const std::map<std::string, std::string>& preset_documents() {
  static const std::map<std::string, std::string> presets{
      {"mnist-fast", R"(data:
  source: synthetic
  kind: edge-shapes
  image_size: 16
  samples: 3000
  val_samples: 500
  seed: 1
  stroke_min: 150
  stroke_max: 200
model:
  arch: cnn-small
  activation: gelu
objective:
  kind: gradnorm
  ce_weight: 0.8
  gradnorm_weight: 1.2
  attack_eps: 0.1
  sigma: 1.0
  warmup_reg_epochs: 2
schedule:
  opt: adamw
  epochs: 10
  sched: cosine
  lrb: 2.0e-3
  warmup_lr: 1.0e-4
  min_lr: 1.0e-5
  warmup_epochs: 1
  batch_size: 64
  eval_eps: 0.1
  eval_it: 10
  eval_examples: 200
attack:
  method: pgd
  eps: 0.1
  step: 0.025
  iterations: 40
diagnostics:
  attack_eps: 0.1
  linearity_eps: 0.1
  direction_eps: 0.1
  direction_grid: [0.0, 0.025, 0.05, 0.075, 0.1]
)"},
      {"cifar-small", R"(data:
  source: auto
  kind: gaussian-blobs
  image_size: 16
  samples: 4000
  val_samples: 500
  seed: 1
  mean: [0.485, 0.456, 0.406]
  std: [0.225, 0.225, 0.225]
model:
  arch: cnn-small
  activation: gelu
objective:
  kind: gradnorm
  ce_weight: 0.5
  gradnorm_weight: 0.5
  attack_eps: 0.03137254901960784
  sigma: 0.225
  warmup_reg_epochs: 2
schedule:
  opt: adamw
  epochs: 10
  sched: cosine
  lrb: 1.0e-3
  warmup_lr: 1.0e-5
  min_lr: 1.0e-5
  warmup_epochs: 1
  batch_size: 64
  weight_decay: 0.05
  eval_eps: 0.03137254901960784
  eval_it: 10
  eval_examples: 200
attack:
  method: pgd
  eps: 0.03137254901960784
  step: 0.00784313725490196
  iterations: 20
diagnostics:
  attack_eps: 0.03137254901960784
  linearity_eps: 0.03137254901960784
  direction_eps: 0.03137254901960784
)"}};
  return presets;
}

/// Copies every key of `over` onto `base`, recursing into maps.
inline void merge_into(YAML::Node base, const YAML::Node& over) {
  for (const auto& kv : over) {
    const auto key = kv.first.as<std::string>();
    if (kv.second.IsMap() && base[key] && base[key].IsMap()) {
      merge_into(base[key], kv.second);
    } else {
      base[key] = kv.second;
    }
  }
}

inline nlohmann::ordered_json yaml_to_json(const YAML::Node& n) {
  if (n.IsMap()) {
    std::map<std::string, YAML::Node> sorted;
    for (const auto& kv : n) sorted.emplace(kv.first.as<std::string>(), kv.second);
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [k, v] : sorted) j[k] = yaml_to_json(v);
    return j;
  }
  if (n.IsSequence()) {
    auto j = nlohmann::ordered_json::array();
    for (const auto& e : n) j.push_back(yaml_to_json(e));
    return j;
  }
  if (n.IsScalar()) return n.Scalar();
  return nullptr;
}

inline YAML::Node load_yaml(const std::string& text, const std::string& origin) {
  try {
    YAML::Node n = YAML::Load(text);
    if (n.IsNull()) return YAML::Node(YAML::NodeType::Map);
    if (!n.IsMap()) throw ConfigError("", 1, origin + " must be a mapping of sections");
    return n;
  } catch (const YAML::ParserException& e) {
    throw ConfigError("", e.mark.line + 1, origin + ": " + e.msg);
  }
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& [k, v] : detail::preset_documents()) out.push_back(k);
  return out;
}

/// A "key=value" override from the command line. `section.key=value` addresses one key;
/// a bare `objective=kind` sets objective.kind.
struct ConfigOverride {
  std::string section;
  std::string key;
  std::string value;
};

inline ConfigOverride parse_override(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(s, 0, "override must look like section.key=value");
  const std::string path = s.substr(0, eq), value = s.substr(eq + 1);
  const auto dot = path.find('.');
  if (dot == std::string::npos) {
    if (path == "seed" || path == "preset") return {"", path, value};
    if (path == "objective") return {"objective", "kind", value};
    throw ConfigError(path, 0, "override must look like section.key=value");
  }
  return {path.substr(0, dot), path.substr(dot + 1), value};
}

/// Builds the effective configuration: preset document, then the config file, then the
/// command-line overrides, each replacing keys of the previous layer.
inline ExperimentConfig load_experiment_config(const std::string& file_text, const std::string& preset = {},
                                               const std::vector<ConfigOverride>& overrides = {},
                                               std::optional<std::uint64_t> seed = std::nullopt) {
  using namespace detail;
  const YAML::Node file = load_yaml(file_text, "config");
  std::string preset_name = preset;
  if (preset_name.empty() && file["preset"]) preset_name = as_string(file["preset"], "preset");
  for (const auto& o : overrides)
    if (o.section.empty() && o.key == "preset") preset_name = o.value;
  YAML::Node merged(YAML::NodeType::Map);
  if (!preset_name.empty()) {
    const auto it = preset_documents().find(preset_name);
    if (it == preset_documents().end()) {
      throw ConfigError("preset", file["preset"] ? line_of(file["preset"]) : 0, "unknown preset '" + preset_name + "'");
    }
    merge_into(merged, load_yaml(it->second, "preset " + preset_name));
    merged["preset"] = preset_name;
  }
  merge_into(merged, file);
  std::set<std::pair<std::string, std::string>> from_cli;
  for (const auto& o : overrides) {
    YAML::Node v = YAML::Load(o.value);
    if (o.section.empty()) {
      merged[o.key] = v;
    } else {
      if (!merged[o.section] || !merged[o.section].IsMap()) merged[o.section] = YAML::Node(YAML::NodeType::Map);
      merged[o.section][o.key] = v;
    }
    from_cli.insert({o.section, o.key});
  }
  if (seed) merged["seed"] = *seed;

  ExperimentConfig cfg;
  const auto& tables = key_tables();
  for (const auto& kv : merged) {
    const auto name = kv.first.as<std::string>();
    const int line = from_cli.count({"", name}) ? 0 : line_of(kv.first);
    if (name == "seed") {
      cfg.seed = as_count(kv.second, "seed");
      continue;
    }
    if (name == "preset") {
      cfg.preset = as_string(kv.second, "preset");
      continue;
    }
    if (out_of_scope_keys().count(name)) {
      throw ConfigError(name, line, "'" + name + "' is an out-of-scope feature (augmentation, mixup, random erasing, "
                                    "drop-path, gradient clipping and step schedules are not supported)");
    }
    const auto table = tables.find(name);
    if (table == tables.end()) {
      throw ConfigError(name, line, "unknown section '" + name + "', expected data, model, objective, schedule, "
                                    "attack, diagnostics, output or seed");
    }
    if (!kv.second.IsMap()) throw ConfigError(name, line, "section must be a mapping");
    // Apply keys in a fixed order so results do not depend on how the document is laid out.
    std::map<std::string, YAML::Node> keys;
    std::map<std::string, int> lines;
    for (const auto& e : kv.second) {
      const auto key = e.first.as<std::string>();
      keys.emplace(key, e.second);
      lines[key] = from_cli.count({name, key}) ? 0 : line_of(e.first);
    }
    for (const auto& [key, node] : keys) {
      const std::string full = name + "." + key;
      if (out_of_scope_keys().count(key)) {
        throw ConfigError(full, lines[key], "'" + key + "' is an out-of-scope feature (augmentation, mixup, random "
                                            "erasing, drop-path, gradient clipping and step schedules are not supported)");
      }
      const auto setter = table->second.find(key);
      if (setter == table->second.end()) throw ConfigError(full, lines[key], "unknown key '" + key + "'");
    }
    // Dependent keys: noise kinds read the attack keys, so those go first.
    std::vector<std::string> order;
    for (const auto& [key, node] : keys)
      if (key.rfind("attack_", 0) == 0) order.push_back(key);
    for (const auto& [key, node] : keys)
      if (key.rfind("attack_", 0) != 0 && key != "input_noise" && key != "noise_std") order.push_back(key);
    for (const char* late : {"noise_std", "input_noise"})
      if (keys.count(late)) order.push_back(late);
    for (const auto& key : order) {
      try {
        table->second.at(key)(cfg, keys.at(key), name + "." + key);
      } catch (const ConfigError& e) {
        if (lines[key] == 0 && e.line() != 0) throw ConfigError(e.key(), 0, std::string(e.what()).substr(std::string(e.what()).find(": ") + 2));
        throw;
      }
    }
  }
  cfg.training.seed = cfg.seed;
  cfg.training.schedule.epochs = static_cast<double>(cfg.training.epochs);
  if (cfg.training.objective.kind == ObjectiveKind::fgsm_train) {
    auto& a = cfg.training.objective.adv.attack;
    a.method = AttackMethod::fgsm;
    a.iterations = 1;
  }
  try {
    cfg.training.validate();
    cfg.attack.attack.validate();
    cfg.diagnostics.cfg.power.validate();
    cfg.diagnostics.cfg.probe.validate();
    cfg.diagnostics.cfg.histogram.reset();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("", 0, e.what());
  }
  cfg.canonical = yaml_to_json(merged).dump();
  return cfg;
}

/// Dataset root: the config's data.dir, else $ROBUSTGRAD_DATA_DIR.
inline std::string data_root(const DataSection& d) {
  if (!d.dir.empty()) return d.dir;
  if (const char* env = std::getenv("ROBUSTGRAD_DATA_DIR")) return env;
  return {};
}

template <Real T>
struct ExperimentData {
  Dataset<T> train;
  Dataset<T> test;
  std::string source;  // what was actually loaded
};

/// Train and evaluation splits for a data section. "auto" reads MNIST IDX or CIFAR binary
/// files from the data root when they are present and otherwise synthesizes.
template <Real T = double>
ExperimentData<T> load_experiment_data(const DataSection& d) {
  namespace fs = std::filesystem;
  const std::string root = data_root(d);
  auto in_root = [&](const std::string& f) { return (fs::path(root) / f).string(); };
  std::string source = d.source;
  if (source == "auto") {
    source = "synthetic";
    if (!root.empty()) {
      if (d.synthetic.kind == SyntheticKind::edge_shapes && fs::exists(in_root(d.train_images))) source = "idx";
      if (d.synthetic.kind == SyntheticKind::gaussian_blobs && fs::exists(in_root(d.cifar_test))) source = "cifar";
    }
  }
  ExperimentData<T> out;
  out.source = source;
  if (source == "synthetic") {
    SyntheticSpec s = d.synthetic;
    s.samples = d.synthetic.samples + d.val_samples;
    auto [tr, va] = train_val_split(synthesize<T>(s), d.val_samples);
    out.train = std::move(tr);
    out.test = std::move(va);
  } else {
    if (root.empty()) throw ConfigError("data.dir", 0, "set data.dir or ROBUSTGRAD_DATA_DIR to load " + source + " files");
    if (source == "idx") {
      out.train = load_idx<T>(in_root(d.train_images), in_root(d.train_labels));
      out.test = load_idx<T>(in_root(d.test_images), in_root(d.test_labels));
    } else {
      for (const auto& f : d.cifar_train) out.train = concatenate(out.train, load_cifar_binary<T>(in_root(f)));
      out.test = load_cifar_binary<T>(in_root(d.cifar_test));
    }
    out.train.split = "train";
    out.test.split = "test";
  }
  if (d.train_limit && d.train_limit < out.train.size()) out.train = out.train.slice(0, d.train_limit);
  if (d.test_limit && d.test_limit < out.test.size()) out.test = out.test.slice(0, d.test_limit);
  const std::size_t c = out.train.images.dim(1);
  if (!d.mean.empty() || !d.std.empty()) {
    Normalization n = Normalization::identity(c);
    auto fill = [&](const std::vector<double>& v, std::vector<double>& dst, const char* key) {
      if (v.empty()) return;
      if (v.size() == 1) {
        dst.assign(c, v[0]);
      } else if (v.size() == c) {
        dst = v;
      } else {
        throw ConfigError(std::string("data.") + key, 0, "expected 1 or " + std::to_string(c) + " values");
      }
    };
    fill(d.mean, n.mean, "mean");
    fill(d.std, n.std, "std");
    n.validate();
    out.train.normalization = out.test.normalization = n;
  } else {
    out.train.normalization = out.test.normalization = Normalization::identity(c);
  }
  return out;
}

/// Freshly initialized network for the model section and the data's input shape.
template <Real T = double>
Network<T> build_network(const ModelSection& m, const Dataset<T>& data, std::uint64_t seed) {
  auto cfg = network_preset(m.arch, m.activation, data.image_shape(), data.num_classes);
  if (!cfg) throw ConfigError("model.arch", 0, "unknown architecture '" + m.arch + "'");
  cfg->normalization = data.normalization;
  Rng rng = Rng::derive(seed, 0x6d6f64656cULL);
  return Network<T>(*cfg, rng);
}

}  // namespace robustgrad
