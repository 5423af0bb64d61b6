#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "robustgrad/ops.hpp"

namespace robustgrad {

namespace detail {

inline void check_labels(std::span<const std::size_t> y, std::size_t batch, std::size_t k) {
  if (y.size() != batch) {
    throw ShapeMismatch(std::to_string(y.size()) + " labels for a batch of " + std::to_string(batch));
  }
  for (auto l : y)
    if (l >= k) throw LabelOutOfRange("label " + std::to_string(l) + " with " + std::to_string(k) + " classes");
}

}  // namespace detail

/// Mean over the batch of -sum_k q_k log p_k with q = (1 - s) onehot(y) + s / K.
template <Real T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::size_t> y, double smoothing = 0.0) {
  if (logits.shape().size() != 2) throw ShapeMismatch("cross_entropy expects [B,K] logits");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw Error("label smoothing must be in [0,1)");
  const std::size_t b = logits.shape()[0], k = logits.shape()[1];
  detail::check_labels(y, b, k);
  Tensor<T> q({b, k}, static_cast<T>(smoothing / static_cast<double>(k)));
  for (std::size_t i = 0; i < b; ++i) q[i * k + y[i]] += static_cast<T>(1.0 - smoothing);
  auto& tape = logits.tape();
  return scale(sum(mul(log_softmax(logits), tape.constant(std::move(q)))), static_cast<T>(-1.0 / static_cast<double>(b)));
}

/// Unsmoothed per-example cross entropy from plain logits, computed stably.
template <Real T>
std::vector<double> per_example_cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> y) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  detail::check_labels(y, b, k);
  std::vector<double> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    double m = logits[i * k];
    for (std::size_t j = 1; j < k; ++j) m = std::max<double>(m, logits[i * k + j]);
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(logits[i * k + j] - m);
    out[i] = m + std::log(s) - logits[i * k + y[i]];
  }
  return out;
}

/// Row-wise softmax of a plain tensor with temperature.
template <Real T>
std::vector<double> softmax_row(const Tensor<T>& logits, std::size_t row, double temperature = 1.0) {
  const std::size_t k = logits.dim(1);
  std::vector<double> p(k);
  double m = -INFINITY;
  for (std::size_t j = 0; j < k; ++j) m = std::max(m, static_cast<double>(logits[row * k + j]) / temperature);
  double s = 0;
  for (std::size_t j = 0; j < k; ++j) s += p[j] = std::exp(static_cast<double>(logits[row * k + j]) / temperature - m);
  for (auto& v : p) v /= s;
  return p;
}

}  // namespace robustgrad
