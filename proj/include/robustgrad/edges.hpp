#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "robustgrad/errors.hpp"
#include "robustgrad/tensor.hpp"

namespace robustgrad {

/// Horizontal/vertical derivative filter pair for oriented energy.
struct EdgeFilter {
  enum class Kind { sobel, gaussian_derivative } kind = Kind::sobel;
  double sigma = 1.0;  // gaussian_derivative only

  static EdgeFilter sobel() { return {}; }
  static EdgeFilter gaussian_derivative(double sigma) { return {Kind::gaussian_derivative, sigma}; }

  /// Square kernel g_u (derivative along columns); g_v is its transpose.
  std::vector<double> kernel_u(std::size_t& side) const {
    if (kind == Kind::sobel) {
      side = 3;
      return {-1, 0, 1, -2, 0, 2, -1, 0, 1};
    }
    if (!(sigma > 0)) throw Error("gaussian derivative sigma must be positive");
    const int r = static_cast<int>(std::ceil(3 * sigma));
    side = static_cast<std::size_t>(2 * r + 1);
    std::vector<double> g(side);
    double z = 0;
    for (int a = -r; a <= r; ++a) z += g[static_cast<std::size_t>(a + r)] = std::exp(-a * a / (2 * sigma * sigma));
    for (auto& v : g) v /= z;
    std::vector<double> k(side * side);
    for (int a = -r; a <= r; ++a)
      for (int b = -r; b <= r; ++b)
        k[static_cast<std::size_t>((a + r) * (2 * r + 1) + b + r)] =
            -b / (sigma * sigma) * g[static_cast<std::size_t>(a + r)] * g[static_cast<std::size_t>(b + r)];
    return k;
  }

  std::string name() const {
    return kind == Kind::sobel ? "sobel" : "gaussian-derivative:" + std::to_string(sigma);
  }

  bool operator==(const EdgeFilter&) const = default;
};

inline std::optional<EdgeFilter> parse_edge_filter(std::string_view s) {
  if (s == "sobel") return EdgeFilter::sobel();
  constexpr std::string_view gd = "gaussian-derivative";
  if (s.substr(0, gd.size()) == gd) {
    if (s.size() == gd.size()) return EdgeFilter::gaussian_derivative(1.0);
    if (s[gd.size()] != ':') return std::nullopt;
    try {
      return EdgeFilter::gaussian_derivative(std::stod(std::string(s.substr(gd.size() + 1))));
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }
  return std::nullopt;
}

/// |g_u * x|^2 + |g_v * x|^2 summed over channels, with replicate padding. Accepts
/// [C,H,W] (returns [H,W]) or [B,C,H,W] (returns [B,H,W]).
template <Real T>
Tensor<T> oriented_energy(const Tensor<T>& x, const EdgeFilter& filter = {}) {
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3) throw ShapeMismatch("oriented_energy expects [C,H,W] or [B,C,H,W]");
  const std::size_t b = batched ? x.dim(0) : 1;
  const std::size_t c = x.dim(batched ? 1 : 0), h = x.dim(batched ? 2 : 1), w = x.dim(batched ? 3 : 2);
  if (h < 3 || w < 3) throw ShapeMismatch("oriented_energy needs H,W >= 3");
  std::size_t side = 0;
  const auto ku = filter.kernel_u(side);
  const int r = static_cast<int>(side / 2);
  Tensor<T> out(batched ? Shape{b, h, w} : Shape{h, w});
  auto px = [&](std::size_t n, std::size_t ch, int i, int j) {
    const auto ci = static_cast<std::size_t>(std::clamp(i, 0, static_cast<int>(h) - 1));
    const auto cj = static_cast<std::size_t>(std::clamp(j, 0, static_cast<int>(w) - 1));
    return static_cast<double>(x[((n * c + ch) * h + ci) * w + cj]);
  };
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double e = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double u = 0, v = 0;
          for (int a = -r; a <= r; ++a)
            for (int bb = -r; bb <= r; ++bb) {
              const double k = ku[static_cast<std::size_t>((a + r) * static_cast<int>(side) + bb + r)];
              if (k == 0) continue;
              // Cross-correlation: g_u at (a, b) and g_v = g_u^T at (b, a).
              u += k * px(n, ch, static_cast<int>(i) + a, static_cast<int>(j) + bb);
              v += k * px(n, ch, static_cast<int>(i) + bb, static_cast<int>(j) + a);
            }
          e += u * u + v * v;
        }
        out[(n * h + i) * w + j] = static_cast<T>(e);
      }
  return out;
}

}  // namespace robustgrad
