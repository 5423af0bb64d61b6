#pragma once

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "robustgrad/diagnostics/curvature.hpp"
#include "robustgrad/diagnostics/gradient_stats.hpp"
#include "robustgrad/diagnostics/interpolation.hpp"
#include "robustgrad/diagnostics/linearity.hpp"
#include "robustgrad/diagnostics/saliency.hpp"

namespace robustgrad {

struct DiagnosticsConfig {
  AttackConfig attack = AttackConfig::pgd(4.0 / 255.0, 10);
  LogHistogram histogram;
  bool edges = true;
  EdgeCorrelationConfig edge;
  bool geometry = true;
  PowerIterationConfig power;
  bool linearity = true;
  LinearityProbe probe;
  std::vector<double> direction_grid;  // empty skips the interpolation sweep
  AttackConfig direction_attack = AttackConfig::pgd(4.0 / 255.0, 5);
};

struct DiagnosticsReport {
  GradientStats gradients;
  double clean_accuracy = 0;
  double robust_accuracy = 0;
  CorrectnessHistograms correctness;
  std::vector<LogHistogram> channels;
  std::optional<EdgeCorrelation> edges;
  std::optional<GeometryStats> geometry;
  std::optional<LinearityStats> linearity;
  std::vector<DirectionPoint> direction;
};

template <Real T, Classifier<T> M>
DiagnosticsReport run_diagnostics(const M& model, const Dataset<T>& data, const DiagnosticsConfig& cfg,
                                  const EvalOptions& opt = {}) {
  DiagnosticsReport r;
  const auto ev = robust_accuracy(model, data, cfg.attack, opt);
  r.clean_accuracy = ev.clean_accuracy;
  r.robust_accuracy = ev.robust_accuracy;
  std::vector<double> l1;
  std::vector<std::uint8_t> ok;
  for (const auto& e : ev.examples) {
    l1.push_back(e.grad_l1);
    ok.push_back(e.clean_correct);
  }
  r.gradients = summarize_gradient_norms(l1, ev.success_mask(), cfg.histogram);
  r.correctness = split_by_correctness(l1, ok, cfg.histogram);
  r.channels = channel_magnitude_histogram(model, data, opt, cfg.histogram);
  if (cfg.edges) r.edges = edge_correlation(model, data, cfg.edge, opt);
  if (cfg.geometry) r.geometry = geometry_stats(model, data, cfg.power, opt);
  if (cfg.linearity) r.linearity = linearity_stats(model, data, cfg.probe, opt);
  if (!cfg.direction_grid.empty()) {
    r.direction = attack_direction_sweep(model, data, cfg.direction_attack, cfg.direction_grid, cfg.power, opt);
  }
  return r;
}

inline nlohmann::ordered_json to_json(const LogHistogram& h) {
  return {{"bin_edges", h.edges()}, {"counts", h.counts}, {"underflow", h.underflow}, {"overflow", h.overflow}};
}

inline nlohmann::ordered_json to_json(const LogSummary& s) {
  return {{"mean_log10", s.mean}, {"std_log10", s.std}, {"count", s.count}};
}

inline nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

inline nlohmann::ordered_json to_json(const CorrelationSeries& s) {
  return {{"mean", s.mean()}, {"std", s.std()}, {"images", s.values.size()}, {"skipped", s.skipped}};
}

/// Summary JSON; per-example values go to diagnostics_csv.
inline nlohmann::ordered_json to_json(const DiagnosticsReport& r) {
  nlohmann::ordered_json j;
  j["clean_accuracy"] = r.clean_accuracy;
  j["robust_accuracy"] = r.robust_accuracy;
  const auto& g = r.gradients;
  j["gradient_norms"] = {{"count", g.count},
                         {"mean_l1", g.mean_l1},
                         {"mean_l1_given_success", optional_json(g.mean_l1_given_success)},
                         {"mean_l1_given_failure", optional_json(g.mean_l1_given_failure)},
                         {"count_success", g.count_success},
                         {"count_failure", g.count_failure},
                         {"histogram", to_json(g.histogram)}};
  j["correctness_histograms"] = {{"correct", to_json(r.correctness.correct)},
                                 {"incorrect", to_json(r.correctness.incorrect)}};
  auto ch = nlohmann::ordered_json::array();
  for (const auto& h : r.channels) ch.push_back(to_json(h));
  j["channel_histograms"] = ch;
  if (r.edges) j["edge_correlation"] = {{"saliency", to_json(r.edges->saliency)}, {"lossgrad", to_json(r.edges->lossgrad)}};
  if (r.geometry) {
    const auto& s = *r.geometry;
    j["geometry"] = {{"grad_l2", s.grad_l2},
                     {"hess_spec", s.hess_spec},
                     {"curvature", s.curvature},
                     {"absent", s.absent},
                     {"log_grad_l2", to_json(s.log_grad_l2)},
                     {"log_hess_spec", to_json(s.log_hess_spec)},
                     {"log_curvature", to_json(s.log_curvature)}};
  }
  if (r.linearity) {
    const auto& s = *r.linearity;
    j["linearity"] = {{"samples_per_example", s.probe.samples_per_example},
                      {"epsilon", s.probe.epsilon},
                      {"mean", s.mean},
                      {"log_error", to_json(s.log_error)}};
  }
  if (!r.direction.empty()) {
    auto d = nlohmann::ordered_json::array();
    for (const auto& p : r.direction) {
      d.push_back({{"epsilon", p.epsilon},
                   {"mean_loss", p.mean_loss},
                   {"mean_grad_l1", p.mean_grad_l1},
                   {"mean_curvature", p.mean_curvature},
                   {"accuracy", p.accuracy}});
    }
    j["attack_direction"] = d;
  }
  return j;
}

/// One row per example; sections that did not run or had no value leave the field empty.
inline std::string diagnostics_csv(const DiagnosticsReport& r) {
  const std::size_t n = r.gradients.l1.size();
  std::vector<std::optional<double>> sal(n), lg(n);
  if (r.edges) {
    for (std::size_t k = 0; k < r.edges->saliency.values.size(); ++k) sal[r.edges->saliency.index[k]] = r.edges->saliency.values[k];
    for (std::size_t k = 0; k < r.edges->lossgrad.values.size(); ++k) lg[r.edges->lossgrad.index[k]] = r.edges->lossgrad.values[k];
  }
  std::ostringstream os;
  os.precision(17);
  auto field = [&](const std::optional<double>& v) {
    os << ',';
    if (v) os << *v;
  };
  os << "index,grad_l1,attack_success,edge_corr_saliency,edge_corr_lossgrad,grad_l2,hess_spec,hess_sign,curvature,"
        "linearity_error\n";
  for (std::size_t i = 0; i < n; ++i) {
    os << i << ',' << r.gradients.l1[i] << ',' << static_cast<int>(r.gradients.attack_success[i]);
    field(sal[i]);
    field(lg[i]);
    if (r.geometry) {
      const auto& e = r.geometry->examples[i];
      os << ',' << e.grad_l2 << ',' << e.hess_spec << ',' << e.hess_sign;
      field(e.curvature);
    } else {
      os << ",,,,";
    }
    field(r.linearity ? std::optional<double>(r.linearity->examples[i]) : std::nullopt);
    os << '\n';
  }
  return os.str();
}

inline std::string direction_csv(const std::vector<DirectionPoint>& pts) {
  std::ostringstream os;
  os.precision(17);
  os << "epsilon,mean_loss,mean_grad_l1,mean_curvature,accuracy\n";
  for (const auto& p : pts)
    os << p.epsilon << ',' << p.mean_loss << ',' << p.mean_grad_l1 << ',' << p.mean_curvature << ',' << p.accuracy << '\n';
  return os.str();
}

}  // namespace robustgrad
