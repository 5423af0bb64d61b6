#pragma once

#include <cstddef>
#include <vector>

#include "robustgrad/errors.hpp"
#include "robustgrad/tensor.hpp"

namespace robustgrad {

/// Per-channel affine map between raw pixels in [0,1] and network inputs.
struct Normalization {
  std::vector<double> mean{0.0};
  std::vector<double> std{1.0};

  static Normalization identity(std::size_t channels) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
  }
  static Normalization uniform(std::size_t channels, double m, double s) {
    return {std::vector<double>(channels, m), std::vector<double>(channels, s)};
  }

  std::size_t channels() const noexcept { return mean.size(); }

  void validate() const {
    if (mean.size() != std.size() || mean.empty()) throw Error("normalization mean/std length mismatch");
    for (double s : std)
      if (!(s > 0)) throw Error("normalization std must be positive");
  }

  bool operator==(const Normalization&) const = default;
};

namespace detail {

template <Real T, class F>
Tensor<T> per_channel(const Tensor<T>& x, const Normalization& n, F f) {
  if (x.rank() != 4 || x.dim(1) != n.channels()) {
    throw ShapeMismatch("normalization over " + std::to_string(n.channels()) + " channels, input " +
                        to_string(x.shape()));
  }
  Tensor<T> out(x.shape());
  const std::size_t plane = x.dim(2) * x.dim(3);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = (i / plane) % n.channels();
    out[i] = f(x[i], static_cast<T>(n.mean[c]), static_cast<T>(n.std[c]));
  }
  return out;
}

}  // namespace detail

template <Real T>
Tensor<T> normalize(const Tensor<T>& raw, const Normalization& n) {
  return detail::per_channel(raw, n, [](T v, T m, T s) { return (v - m) / s; });
}

template <Real T>
Tensor<T> denormalize(const Tensor<T>& x, const Normalization& n) {
  return detail::per_channel(x, n, [](T v, T m, T s) { return v * s + m; });
}

/// Raw-pixel radius expressed in normalized units for channel c.
inline double normalized_radius(double raw_eps, const Normalization& n, std::size_t c = 0) {
  return raw_eps / n.std.at(c);
}

}  // namespace robustgrad
