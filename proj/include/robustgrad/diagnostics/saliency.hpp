#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "robustgrad/diagnostics/gradient_stats.hpp"
#include "robustgrad/edges.hpp"

namespace robustgrad {

/// max_c |g[b,c,h,w]|: [B,C,H,W] -> [B,H,W], or [C,H,W] -> [H,W].
template <Real T>
Tensor<T> channel_max_abs(const Tensor<T>& g) {
  const bool batched = g.rank() == 4;
  if (!batched && g.rank() != 3) throw ShapeMismatch("channel_max_abs expects [C,H,W] or [B,C,H,W]");
  const std::size_t b = batched ? g.dim(0) : 1, c = g.dim(batched ? 1 : 0);
  const std::size_t h = g.dim(batched ? 2 : 1), w = g.dim(batched ? 3 : 2), hw = h * w;
  Tensor<T> out(batched ? Shape{b, h, w} : Shape{h, w}, T(0));
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[n * hw + p] = std::max(out[n * hw + p], std::abs(g[(n * c + ch) * hw + p]));
  return out;
}

/// Per-pixel max over channels of |d f(x)_t / dx| for a batch [B,C,H,W] -> [B,H,W].
template <Real T, Classifier<T> M>
Tensor<T> saliency_maps(const M& model, const Tensor<T>& x, std::span<const std::size_t> t) {
  return channel_max_abs(logit_input_gradient(model, x, t));
}

/// Single image [C,H,W] -> [H,W].
template <Real T, Classifier<T> M>
Tensor<T> saliency_map(const M& model, const Tensor<T>& x, std::size_t t) {
  if (x.rank() != 3) throw ShapeMismatch("saliency_map expects [C,H,W]");
  const std::size_t ts[1] = {t};
  return saliency_maps(model, x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}), std::span<const std::size_t>(ts))
      .reshaped({x.dim(1), x.dim(2)});
}

/// Copy of `v` with every entry above its q-quantile set to that quantile. Only for
/// exported plot data.
template <Real T>
Tensor<T> clip_percentile(const Tensor<T>& v, double q) {
  if (!(q > 0 && q <= 1)) throw Error("percentile must be in (0,1]");
  if (v.size() == 0) return v;
  std::vector<T> sorted(v.data().begin(), v.data().end());
  std::sort(sorted.begin(), sorted.end());
  const auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size()))) - 1;
  const T cap = sorted[std::min(k, sorted.size() - 1)];
  Tensor<T> out = v;
  for (auto& e : out.data()) e = std::min(e, cap);
  return out;
}

/// Pearson correlation of log(|a| + 1e-17) and log(max(b, floor)); absent when either log
/// series is constant.
inline std::optional<double> log_pearson(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw ShapeMismatch("correlation series lengths differ");
  if (!(floor > 0)) throw Error("edge clamp floor must be positive");
  const std::size_t n = a.size();
  if (n < 2) return std::nullopt;
  std::vector<double> la(n), lb(n);
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += la[i] = std::log(std::abs(a[i]) + kLogFloor);
    mb += lb[i] = std::log(std::max(b[i], floor));
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (la[i] - ma) * (lb[i] - mb);
    saa += (la[i] - ma) * (la[i] - ma);
    sbb += (lb[i] - mb) * (lb[i] - mb);
  }
  // Rounding leaves a tiny residual variance in a constant series.
  const double tiny = 1e-24 * static_cast<double>(n);
  if (saa <= tiny * (1 + ma * ma) || sbb <= tiny * (1 + mb * mb)) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

struct EdgeCorrelationConfig {
  EdgeFilter filter;
  double clamp_floor = 1e-3;
};

/// Mean and spread of per-image correlations; skipped counts images whose log series was
/// constant.
struct CorrelationSeries {
  std::vector<double> values;
  std::vector<std::size_t> index;
  std::size_t skipped = 0;

  double mean() const {
    if (values.empty()) return 0;
    double s = 0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
  }

  double std() const {
    if (values.empty()) return 0;
    const double m = mean();
    double s = 0;
    for (double v : values) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(values.size()));
  }
};

struct EdgeCorrelation {
  CorrelationSeries saliency;  // true-label saliency vs edge
  CorrelationSeries lossgrad;  // channel-max |dL/dx| vs edge
};

namespace detail {

template <Real T>
std::vector<double> plane(const Tensor<T>& maps, std::size_t n) {
  const std::size_t hw = maps.size() / maps.dim(0);
  std::vector<double> out(hw);
  for (std::size_t p = 0; p < hw; ++p) out[p] = static_cast<double>(maps[n * hw + p]);
  return out;
}

inline void add_correlation(CorrelationSeries& s, std::optional<double> r, std::size_t index) {
  if (r) {
    s.values.push_back(*r);
    s.index.push_back(index);
  } else {
    ++s.skipped;
  }
}

}  // namespace detail

template <Real T, Classifier<T> M>
EdgeCorrelation edge_correlation(const M& model, const Dataset<T>& data, const EdgeCorrelationConfig& cfg = {},
                                 const EvalOptions& opt = {}) {
  if (!(cfg.clamp_floor > 0)) throw Error("edge clamp floor must be positive");
  const std::size_t shards = detail::shard_count(detail::example_count(data, opt), opt);
  std::vector<EdgeCorrelation> parts(shards);
  detail::for_each_shard(data, opt, [&](std::size_t s, std::size_t begin, const Tensor<T>& x,
                                        std::span<const std::size_t> y) {
    const auto edge = oriented_energy(x, cfg.filter);
    const auto sal = saliency_maps(model, x, y);
    const auto lg = channel_max_abs(loss_input_gradient(model, x, y).gradient);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const auto e = detail::plane(edge, i);
      detail::add_correlation(parts[s].saliency, log_pearson(detail::plane(sal, i), e, cfg.clamp_floor), begin + i);
      detail::add_correlation(parts[s].lossgrad, log_pearson(detail::plane(lg, i), e, cfg.clamp_floor), begin + i);
    }
  });
  EdgeCorrelation out;
  for (const auto& p : parts) {
    for (auto [dst, src] : {std::pair{&out.saliency, &p.saliency}, std::pair{&out.lossgrad, &p.lossgrad}}) {
      dst->values.insert(dst->values.end(), src->values.begin(), src->values.end());
      dst->index.insert(dst->index.end(), src->index.begin(), src->index.end());
      dst->skipped += src->skipped;
    }
  }
  return out;
}

}  // namespace robustgrad
