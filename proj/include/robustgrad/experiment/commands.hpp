#pragma once

#include <chrono>
#include <filesystem>
#include <sstream>
#include <string>

#include <json.hpp>

#include "robustgrad/experiment/config.hpp"
#include "robustgrad/experiment/manifest.hpp"
#include "robustgrad/nn/checkpoint.hpp"

namespace robustgrad {

struct RunOptions {
  std::string out_dir;     // empty uses output.dir from the config
  std::string checkpoint;  // model to load; empty uses <out>/model.ckpt
  std::size_t threads = 1;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::string out_dir(const ExperimentConfig& cfg, const RunOptions& run) {
  return run.out_dir.empty() ? cfg.output.dir : run.out_dir;
}

inline nlohmann::ordered_json attack_json(const AttackConfig& a) {
  return {{"method", attack_method_name(a.method)},
          {"epsilon", a.epsilon},
          {"step_size", a.step_size},
          {"iterations", a.iterations},
          {"restarts", a.restarts},
          {"random_init", a.random_init},
          {"direction", a.direction == AttackDirection::sign ? "sign" : "l2"}};
}

inline EvalOptions attack_eval_options(const ExperimentConfig& cfg, const RunOptions& run) {
  EvalOptions o;
  o.seed = cfg.seed;
  o.batch_size = cfg.attack.batch_size;
  o.threads = run.threads;
  o.limit = cfg.attack.examples;
  return o;
}

template <Real T>
void check_compatible(const Network<T>& net, const Dataset<T>& data, const std::string& path) {
  const auto& c = net.config();
  if (c.input_shape != data.image_shape() || c.num_classes != data.num_classes) {
    throw CheckpointMismatch(path + " expects input " + to_string(c.input_shape) + " with " +
                             std::to_string(c.num_classes) + " classes, data has " + to_string(data.image_shape()) +
                             " with " + std::to_string(data.num_classes));
  }
}

template <Real T>
Network<T> load_model(const ExperimentConfig& cfg, const RunOptions& run, const Dataset<T>& data) {
  const std::string path =
      run.checkpoint.empty() ? (std::filesystem::path(out_dir(cfg, run)) / "model.ckpt").string() : run.checkpoint;
  auto net = load_checkpoint<T>(path);
  check_compatible(net, data, path);
  return net;
}

inline nlohmann::ordered_json evaluation_json(const RobustEvaluation& ev) {
  double l1 = 0;
  for (const auto& e : ev.examples) l1 += e.grad_l1;
  return {{"examples", ev.examples.size()},
          {"clean_accuracy", ev.clean_accuracy},
          {"robust_accuracy", ev.robust_accuracy},
          {"mean_loss_adv", ev.mean_loss_adv},
          {"mean_grad_l1", ev.examples.empty() ? 0.0 : l1 / static_cast<double>(ev.examples.size())}};
}

inline void describe_data(RunManifest& m, const ExperimentConfig& cfg, const std::string& source) {
  m.set("preset", cfg.preset.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(cfg.preset));
  m.set("data_source", source);
  m.set("config", nlohmann::ordered_json::parse(cfg.canonical));
}

}  // namespace detail

/// Trains the configured model and evaluates it with the attack section on the test split.
inline nlohmann::ordered_json cmd_train(const ExperimentConfig& cfg, const RunOptions& run) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = load_experiment_data<double>(cfg.data);
  RunManifest m("train", detail::out_dir(cfg, run), fnv1a_hex(cfg.canonical), cfg.seed);
  detail::describe_data(m, cfg, data.source);
  TrainingConfig tc = cfg.training;
  tc.threads = run.threads;
  const auto init = build_network(cfg.model, data.train, cfg.seed);
  auto res = train(init, data.train, data.test, tc);
  m.add_passes(res.log.passes_total);

  const auto opt = detail::attack_eval_options(cfg, run);
  nlohmann::ordered_json summary;
  summary["train_examples"] = data.train.size();
  summary["test_examples"] = data.test.size();
  summary["objective"] = objective_name(tc.objective.kind);
  summary["passes_per_batch"] = res.log.passes_per_batch.total();
  summary["aborted"] = res.log.aborted ? nlohmann::ordered_json(*res.log.aborted) : nlohmann::ordered_json(nullptr);
  summary["attack"] = detail::attack_json(cfg.attack.attack);
  summary["final"] = detail::evaluation_json(robust_accuracy(res.net, data.test, cfg.attack.attack, opt));
  m.write("model.ckpt", encode_checkpoint(res.net));
  if (tc.ema_decay > 0) {
    summary["ema"] = detail::evaluation_json(robust_accuracy(res.ema, data.test, cfg.attack.attack, opt));
    m.write("ema.ckpt", encode_checkpoint(res.ema));
  }
  m.write_csv("train_log.csv", res.log.csv());
  m.write_json("summary.json", summary);
  m.finish(detail::seconds_since(t0));
  return summary;
}

/// Robust accuracy of a checkpoint, the optional epsilon and iteration sweeps, and the
/// optional transfer attack from a second checkpoint.
inline nlohmann::ordered_json cmd_attack(const ExperimentConfig& cfg, const RunOptions& run) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = load_experiment_data<double>(cfg.data);
  const auto net = detail::load_model(cfg, run, data.test);
  RunManifest m("attack", detail::out_dir(cfg, run), fnv1a_hex(cfg.canonical), cfg.seed);
  detail::describe_data(m, cfg, data.source);
  const auto opt = detail::attack_eval_options(cfg, run);
  const auto& atk = cfg.attack.attack;

  const auto ev = robust_accuracy(net, data.test, atk, opt);
  m.add_passes(ev.passes);
  nlohmann::ordered_json report;
  report["attack"] = detail::attack_json(atk);
  report["direct"] = detail::evaluation_json(ev);
  m.write_csv("attack_examples.csv", attack_csv(ev));
  if (!cfg.attack.transfer_source.empty()) {
    const auto source = load_checkpoint<double>(cfg.attack.transfer_source);
    detail::check_compatible(source, data.test, cfg.attack.transfer_source);
    const auto tr = transfer_robust_accuracy(source, net, data.test, atk, opt);
    m.add_passes(tr.passes);
    report["transfer"] = detail::evaluation_json(tr);
    report["transfer"]["source"] = std::filesystem::path(cfg.attack.transfer_source).filename().string();
    m.write_csv("transfer_examples.csv", attack_csv(tr));
  }
  if (!cfg.attack.eps_grid.empty()) {
    const auto pts = epsilon_sweep(net, data.test, atk, cfg.attack.eps_grid, opt);
    m.write_csv("epsilon_sweep.csv", sweep_csv("epsilon", pts));
  }
  if (!cfg.attack.iteration_grid.empty()) {
    const auto pts = iteration_sweep(net, data.test, atk, cfg.attack.iteration_grid, opt);
    m.write_csv("iteration_sweep.csv", sweep_csv("iterations", pts));
  }
  m.write_json("attack.json", report);
  m.finish(detail::seconds_since(t0));
  return report;
}

/// Saliency and edge-energy maps for the first examples, one row per pixel.
template <Real T, Classifier<T> M>
std::string saliency_csv(const M& model, const Dataset<T>& data, std::size_t count, double clip, const EdgeFilter& filter) {
  count = std::min(count, data.size());
  std::ostringstream os;
  os.precision(17);
  os << "index,label,row,col,saliency,saliency_clipped,edge_energy\n";
  if (count == 0) return os.str();
  const auto batch = data.slice(0, count);
  const auto sal = saliency_maps(model, batch.images, std::span<const std::size_t>(batch.labels));
  const auto edge = oriented_energy(batch.images, filter);
  const std::size_t h = sal.dim(1), w = sal.dim(2);
  for (std::size_t n = 0; n < count; ++n) {
    Tensor<T> one(Shape{h, w});
    for (std::size_t i = 0; i < h * w; ++i) one[i] = sal[n * h * w + i];
    const auto clipped = clip_percentile(one, clip);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t k = r * w + c;
        os << n << ',' << batch.labels[n] << ',' << r << ',' << c << ',' << one[k] << ',' << clipped[k] << ','
           << edge[n * h * w + k] << '\n';
      }
  }
  return os.str();
}

/// The diagnostics selected in the diagnostics section, on the first examples of the test split.
inline nlohmann::ordered_json cmd_diagnose(const ExperimentConfig& cfg, const RunOptions& run) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = load_experiment_data<double>(cfg.data);
  if (data.test.empty()) throw EmptyDataset("diagnostics on an empty dataset");
  const auto net = detail::load_model(cfg, run, data.test);
  RunManifest m("diagnose", detail::out_dir(cfg, run), fnv1a_hex(cfg.canonical), cfg.seed);
  detail::describe_data(m, cfg, data.source);
  const auto& which = cfg.diagnostics.which;
  DiagnosticsConfig dc = cfg.diagnostics.cfg;
  dc.edges = which.count("edges") > 0;
  dc.geometry = which.count("geometry") > 0;
  dc.linearity = which.count("linearity") > 0;
  if (!which.count("direction")) dc.direction_grid.clear();
  if (which.count("direction") && dc.direction_grid.empty()) {
    throw ConfigError("diagnostics.direction_grid", 0, "the direction diagnostic needs a non-empty grid");
  }
  dc.power.seed = cfg.seed;
  EvalOptions opt;
  opt.seed = cfg.seed;
  opt.batch_size = cfg.diagnostics.batch_size;
  opt.threads = run.threads;
  opt.limit = cfg.diagnostics.examples;
  const auto report = run_diagnostics(net, data.test, dc, opt);
  auto j = to_json(report);
  j["attack"] = detail::attack_json(dc.attack);
  j["which"] = which;
  m.write_json("diagnostics.json", j);
  m.write_csv("diagnostics.csv", diagnostics_csv(report));
  if (!report.direction.empty()) m.write_csv("direction.csv", direction_csv(report.direction));
  if (which.count("saliency")) {
    m.write_csv("saliency.csv", saliency_csv(net, data.test, cfg.diagnostics.saliency_examples,
                                             cfg.diagnostics.saliency_clip, dc.edge.filter));
  }
  m.finish(detail::seconds_since(t0));
  return j;
}

enum class SweepKind { lambda, epsilon, interpolation };

inline std::optional<SweepKind> parse_sweep_kind(std::string_view s) {
  if (s == "lambda") return SweepKind::lambda;
  if (s == "epsilon") return SweepKind::epsilon;
  if (s == "interpolation") return SweepKind::interpolation;
  return std::nullopt;
}

/// One curve file: lambda trains a model per grid value; epsilon and interpolation
/// evaluate a checkpoint.
inline nlohmann::ordered_json cmd_sweep(SweepKind kind, const ExperimentConfig& cfg, const RunOptions& run) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = load_experiment_data<double>(cfg.data);
  const char* names[] = {"sweep-lambda", "sweep-epsilon", "sweep-interpolation"};
  RunManifest m(names[static_cast<int>(kind)], detail::out_dir(cfg, run), fnv1a_hex(cfg.canonical), cfg.seed);
  detail::describe_data(m, cfg, data.source);
  nlohmann::ordered_json out;
  if (kind == SweepKind::lambda) {
    if (cfg.lambda_grid.empty()) throw ConfigError("objective.lambda_grid", 0, "lambda sweep needs a non-empty grid");
    TrainingConfig tc = cfg.training;
    tc.threads = run.threads;
    tc.eval_attack = cfg.attack.attack;
    tc.eval_examples = cfg.attack.examples;
    std::vector<TrainResult<double>> runs;
    const auto pts = lambda_sweep(build_network(cfg.model, data.train, cfg.seed), data.train, data.test, tc,
                                  cfg.lambda_grid, &runs);
    for (const auto& r : runs) m.add_passes(r.log.passes_total);
    std::ostringstream os;
    os.precision(17);
    os << "lambda,clean_accuracy,robust_accuracy\n";
    for (const auto& p : pts) os << p.lambda << ',' << p.clean_accuracy << ',' << p.robust_accuracy << '\n';
    m.write_csv("lambda_sweep.csv", os.str());
    out["kind"] = "lambda";
    out["points"] = pts.size();
  } else {
    const auto net = detail::load_model(cfg, run, data.test);
    if (kind == SweepKind::epsilon) {
      if (cfg.attack.eps_grid.empty()) throw ConfigError("attack.eps_grid", 0, "epsilon sweep needs a non-empty grid");
      const auto pts = epsilon_sweep(net, data.test, cfg.attack.attack, cfg.attack.eps_grid,
                                     detail::attack_eval_options(cfg, run));
      m.write_csv("epsilon_sweep.csv", sweep_csv("epsilon", pts));
      out["kind"] = "epsilon";
      out["points"] = pts.size();
    } else {
      const auto& grid = cfg.diagnostics.cfg.direction_grid;
      if (grid.empty()) throw ConfigError("diagnostics.direction_grid", 0, "interpolation sweep needs a non-empty grid");
      PowerIterationConfig power = cfg.diagnostics.cfg.power;
      power.seed = cfg.seed;
      EvalOptions opt;
      opt.seed = cfg.seed;
      opt.batch_size = cfg.diagnostics.batch_size;
      opt.threads = run.threads;
      opt.limit = cfg.diagnostics.examples;
      const auto pts = attack_direction_sweep(net, data.test, cfg.diagnostics.cfg.direction_attack, grid, power, opt);
      m.write_csv("interpolation.csv", direction_csv(pts));
      out["kind"] = "interpolation";
      out["points"] = pts.size();
    }
  }
  m.finish(detail::seconds_since(t0));
  return out;
}

/// Plain-text overview of the runs recorded in `dir` and its immediate subdirectories.
inline std::string cmd_report(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error("no such run directory: " + dir);
  const std::string suffix = ".manifest.json";
  auto manifests_in = [&](const fs::path& d) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(d)) {
      const auto name = e.path().filename().string();
      if (e.is_regular_file() && name.size() > suffix.size() && name.ends_with(suffix)) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  std::vector<fs::path> manifests = manifests_in(dir);
  std::vector<fs::path> subs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) subs.push_back(e.path());
  std::sort(subs.begin(), subs.end());
  for (const auto& d : subs)
    for (auto& p : manifests_in(d)) manifests.push_back(std::move(p));
  if (manifests.empty()) throw Error("no run manifests under " + dir);

  std::ostringstream os;
  os.precision(4);
  auto read_json = [](const fs::path& p) { return nlohmann::json::parse(read_file(p.string())); };
  auto line = [&](const char* label, const nlohmann::json& ev) {
    os << "  " << label << ": clean " << ev.at("clean_accuracy").get<double>() << " robust "
       << ev.at("robust_accuracy").get<double>() << '\n';
  };
  for (const auto& mp : manifests) {
    const auto man = read_json(mp);
    const auto cmd = man.at("command").get<std::string>();
    const auto r = mp.parent_path();
    os << r.string() << ": " << cmd << " config " << man.at("config_hash").get<std::string>() << " seed "
       << man.at("seed").get<std::uint64_t>() << " passes " << man.at("passes").at("total").get<std::size_t>() << '\n';
    if (cmd == "train" && fs::exists(r / "summary.json")) {
      const auto s = read_json(r / "summary.json");
      line("final", s.at("final"));
      if (s.contains("ema")) line("ema", s.at("ema"));
    }
    if (cmd == "attack" && fs::exists(r / "attack.json")) {
      const auto a = read_json(r / "attack.json");
      line("direct", a.at("direct"));
      if (a.contains("transfer")) line("transfer", a.at("transfer"));
    }
    if (cmd == "diagnose" && fs::exists(r / "diagnostics.json")) {
      const auto d = read_json(r / "diagnostics.json");
      const auto& g = d.at("gradient_norms");
      os << "  gradient l1: mean " << g.at("mean_l1").get<double>();
      for (const char* k : {"mean_l1_given_success", "mean_l1_given_failure"})
        if (!g.at(k).is_null()) os << ", " << k << ' ' << g.at(k).get<double>();
      os << '\n';
      if (d.contains("edge_correlation")) {
        os << "  edge correlation: saliency " << d["edge_correlation"]["saliency"]["mean"].get<double>() << " lossgrad "
           << d["edge_correlation"]["lossgrad"]["mean"].get<double>() << '\n';
      }
      if (d.contains("geometry")) os << "  mean curvature: " << d["geometry"]["curvature"].get<double>() << '\n';
      if (d.contains("linearity")) os << "  local linearity: " << d["linearity"]["mean"].get<double>() << '\n';
    }
    for (const auto& o : man.at("outputs"))
      if (o.at("path").get<std::string>().ends_with(".csv")) os << "  " << o.at("path").get<std::string>() << '\n';
    const auto timing = r / (cmd + ".timing.json");
    if (fs::exists(timing)) os << "  wall: " << read_json(timing).at("wall_seconds").get<double>() << " s\n";
  }
  return os.str();
}

}  // namespace robustgrad
