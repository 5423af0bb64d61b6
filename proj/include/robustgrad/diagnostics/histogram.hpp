#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "robustgrad/errors.hpp"

namespace robustgrad {

/// Added before every log10 so exact zeros stay finite.
inline constexpr double kLogFloor = 1e-17;

inline double safe_log10(double v) { return std::log10(std::abs(v) + kLogFloor); }

/// Histogram over log10(|v| + 1e-17) with `bins_per_decade` equal bins between 10^lo_exp and
/// 10^hi_exp. Values below or above the range land in separate underflow / overflow counters.
struct LogHistogram {
  int lo_exp = -12;
  int hi_exp = 4;
  int bins_per_decade = 4;
  std::vector<std::size_t> counts;
  std::size_t underflow = 0;
  std::size_t overflow = 0;

  LogHistogram() { reset(); }
  LogHistogram(int lo, int hi, int per_decade) : lo_exp(lo), hi_exp(hi), bins_per_decade(per_decade) { reset(); }

  void reset() {
    if (hi_exp <= lo_exp || bins_per_decade < 1) throw Error("histogram range must be non-empty");
    counts.assign(static_cast<std::size_t>((hi_exp - lo_exp) * bins_per_decade), 0);
    underflow = overflow = 0;
  }

  std::size_t bins() const noexcept { return counts.size(); }

  /// Bin edges in log10 units, bins() + 1 values.
  std::vector<double> edges() const {
    std::vector<double> e(bins() + 1);
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = lo_exp + static_cast<double>(i) / bins_per_decade;
    return e;
  }

  void add(double v) {
    const double l = safe_log10(v);
    const double pos = (l - lo_exp) * bins_per_decade;
    if (pos < 0) {
      ++underflow;
    } else if (pos >= static_cast<double>(bins())) {
      ++overflow;
    } else {
      ++counts[static_cast<std::size_t>(pos)];
    }
  }

  void add_all(std::span<const double> vs) {
    for (double v : vs) add(v);
  }

  std::size_t total() const {
    std::size_t t = underflow + overflow;
    for (auto c : counts) t += c;
    return t;
  }

  bool same_layout(const LogHistogram& o) const {
    return lo_exp == o.lo_exp && hi_exp == o.hi_exp && bins_per_decade == o.bins_per_decade;
  }

  LogHistogram& operator+=(const LogHistogram& o) {
    if (!same_layout(o)) throw Error("histogram layouts differ");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    underflow += o.underflow;
    overflow += o.overflow;
    return *this;
  }

  bool operator==(const LogHistogram&) const = default;
};

/// Mean and standard deviation of log10(|v| + 1e-17).
struct LogSummary {
  double mean = 0;
  double std = 0;
  std::size_t count = 0;
};

inline LogSummary log_summary(std::span<const double> vs) {
  LogSummary s;
  s.count = vs.size();
  if (vs.empty()) return s;
  for (double v : vs) s.mean += safe_log10(v);
  s.mean /= static_cast<double>(vs.size());
  for (double v : vs) s.std += (safe_log10(v) - s.mean) * (safe_log10(v) - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(vs.size()));
  return s;
}

}  // namespace robustgrad
