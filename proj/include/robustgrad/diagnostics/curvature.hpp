#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "robustgrad/autodiff.hpp"
#include "robustgrad/diagnostics/gradient_stats.hpp"

namespace robustgrad {

enum class PowerInit { gradient, random };

inline std::optional<PowerInit> parse_power_init(std::string_view s) {
  if (s == "gradient") return PowerInit::gradient;
  if (s == "random") return PowerInit::random;
  return std::nullopt;
}

struct PowerIterationConfig {
  std::size_t iterations = 20;
  PowerInit init = PowerInit::gradient;
  double tolerance = 1e-6;  // relative change of the Rayleigh quotient
  std::uint64_t seed = 0;

  void validate() const {
    if (iterations < 1) throw Error("power iterations must be >= 1");
    if (!(tolerance >= 0)) throw Error("power iteration tolerance must be >= 0");
  }
};

inline constexpr double kZeroGradient = 1e-12;

/// Gradient norm, Hessian spectral norm and their ratio at one example.
struct CurvatureEntry {
  double grad_l2 = 0;
  double hess_spec = 0;   // |largest-magnitude eigenvalue|
  int hess_sign = 0;      // sign of that eigenvalue
  std::optional<double> curvature;  // absent when the gradient vanishes
  std::size_t iterations = 0;
  bool converged = false;
};

/// Power iteration on the Hessian of every example at once. `loss(tape, xv)` must return the
/// sum of independent per-example losses over the leading axis of x, so the Hessian is block
/// diagonal and one product serves every example.
template <Real T, class LossFn>
std::vector<CurvatureEntry> power_iteration_curvature(LossFn&& loss, const Tensor<T>& x, const PowerIterationConfig& cfg) {
  cfg.validate();
  const std::size_t b = x.dim(0), per = x.size() / std::max<std::size_t>(b, 1);
  Tape<T> tape;
  const auto xv = tape.variable(x);
  const HessianOperator<T> hess(loss(tape, xv), xv);
  const Tensor<T> g = hess.gradient().value();
  std::vector<CurvatureEntry> out(b);
  Rng rng(cfg.seed);
  Tensor<T> v(x.shape());
  auto normalize = [&](std::size_t i) {
    double n = 0;
    for (std::size_t j = 0; j < per; ++j) n += static_cast<double>(v[i * per + j]) * v[i * per + j];
    n = std::sqrt(n);
    for (std::size_t j = 0; j < per; ++j) v[i * per + j] = static_cast<T>(v[i * per + j] / n);
  };
  for (std::size_t i = 0; i < b; ++i) {
    double gn = 0;
    for (std::size_t j = 0; j < per; ++j) gn += static_cast<double>(g[i * per + j]) * g[i * per + j];
    out[i].grad_l2 = std::sqrt(gn);
    const bool from_grad = cfg.init == PowerInit::gradient && out[i].grad_l2 >= kZeroGradient;
    for (std::size_t j = 0; j < per; ++j) v[i * per + j] = from_grad ? g[i * per + j] : static_cast<T>(rng.normal());
    normalize(i);
  }
  std::vector<std::uint8_t> done(b, 0);
  std::vector<double> prev(b, 0);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const Tensor<T> hv = hess.apply(v);
    bool all = true;
    for (std::size_t i = 0; i < b; ++i) {
      if (done[i]) continue;
      double rq = 0, hn = 0;
      for (std::size_t j = 0; j < per; ++j) {
        rq += static_cast<double>(v[i * per + j]) * hv[i * per + j];
        hn += static_cast<double>(hv[i * per + j]) * hv[i * per + j];
      }
      hn = std::sqrt(hn);
      auto& e = out[i];
      e.iterations = it + 1;
      e.hess_spec = std::abs(rq);
      e.hess_sign = rq > 0 ? 1 : (rq < 0 ? -1 : 0);
      if (hn == 0) {
        // Zero Hessian along v: the operator annihilates the start vector.
        done[i] = 1;
        e.converged = true;
        continue;
      }
      if (it > 0 && std::abs(rq - prev[i]) <= cfg.tolerance * std::abs(rq)) {
        done[i] = 1;
        e.converged = true;
        continue;
      }
      prev[i] = rq;
      for (std::size_t j = 0; j < per; ++j) v[i * per + j] = static_cast<T>(hv[i * per + j] / hn);
      all = false;
    }
    if (all) break;
  }
  for (auto& e : out)
    if (e.grad_l2 >= kZeroGradient) e.curvature = e.hess_spec / e.grad_l2;
  return out;
}

/// Curvature of the per-example cross entropy in raw pixel space.
template <Real T, Classifier<T> M>
std::vector<CurvatureEntry> normalized_curvature(const M& model, const Tensor<T>& x, std::span<const std::size_t> y,
                                                 const PowerIterationConfig& cfg = {}) {
  return power_iteration_curvature(
      [&](Tape<T>&, const Var<T>& xv) {
        return scale(cross_entropy(model.forward(xv.tape(), xv), y), static_cast<T>(y.size()));
      },
      x, cfg);
}

struct GeometryStats {
  double grad_l2 = 0;
  double hess_spec = 0;
  double curvature = 0;  // mean over examples where it is present
  std::size_t absent = 0;
  LogSummary log_grad_l2;
  LogSummary log_hess_spec;
  LogSummary log_curvature;
  std::vector<CurvatureEntry> examples;
};

inline GeometryStats summarize_geometry(std::vector<CurvatureEntry> entries) {
  GeometryStats s;
  std::vector<double> g, h, c;
  for (const auto& e : entries) {
    g.push_back(e.grad_l2);
    h.push_back(e.hess_spec);
    if (e.curvature) {
      c.push_back(*e.curvature);
    } else {
      ++s.absent;
    }
  }
  auto mean = [](const std::vector<double>& v) {
    double t = 0;
    for (double x : v) t += x;
    return v.empty() ? 0.0 : t / static_cast<double>(v.size());
  };
  s.grad_l2 = mean(g);
  s.hess_spec = mean(h);
  s.curvature = mean(c);
  s.log_grad_l2 = log_summary(g);
  s.log_hess_spec = log_summary(h);
  s.log_curvature = log_summary(c);
  s.examples = std::move(entries);
  return s;
}

/// Per-shard random starts draw from Rng::derive(cfg.seed, shard).
template <Real T, Classifier<T> M>
GeometryStats geometry_stats(const M& model, const Dataset<T>& data, const PowerIterationConfig& cfg = {},
                             const EvalOptions& opt = {}) {
  cfg.validate();
  const std::size_t shards = detail::shard_count(detail::example_count(data, opt), opt);
  std::vector<std::vector<CurvatureEntry>> parts(shards);
  detail::for_each_shard(data, opt, [&](std::size_t s, std::size_t, const Tensor<T>& x, std::span<const std::size_t> y) {
    PowerIterationConfig c = cfg;
    c.seed = Rng::derive(cfg.seed, s).next_u64();
    parts[s] = normalized_curvature(model, x, y, c);
  });
  std::vector<CurvatureEntry> all;
  for (auto& p : parts) all.insert(all.end(), p.begin(), p.end());
  return summarize_geometry(std::move(all));
}

}  // namespace robustgrad
