#pragma once

#include <span>
#include <vector>

#include "robustgrad/losses.hpp"
#include "robustgrad/nn/network.hpp"

namespace robustgrad {

/// Loss value and input gradient of a batch at raw-pixel input.
template <Real T>
struct InputGradient {
  Tensor<T> gradient;         // same shape as x; row i is the gradient of example i's loss
  Tensor<T> logits;
  std::vector<double> loss;   // per-example cross entropy
  PassTally passes;
};

/// d L_CE(f(x_i), y_i) / d x_i for every example, with x in raw pixel space.
template <Real T, Classifier<T> M>
InputGradient<T> loss_input_gradient(const M& model, const Tensor<T>& x, std::span<const std::size_t> y) {
  Tape<T> tape;
  const auto xv = tape.variable(x);
  const auto logits = model.forward(tape, xv);
  // Summing instead of averaging keeps each row equal to that example's own gradient.
  const auto total = scale(cross_entropy(logits, y), static_cast<T>(y.size()));
  InputGradient<T> out;
  out.gradient = tape.gradient(total, {xv})[0].value();
  out.logits = logits.value();
  out.loss = per_example_cross_entropy(out.logits, y);
  out.passes = tape.tally();
  return out;
}

/// d f(x_i)_{t_i} / d x_i for every example.
template <Real T, Classifier<T> M>
Tensor<T> logit_input_gradient(const M& model, const Tensor<T>& x, std::span<const std::size_t> t) {
  Tape<T> tape;
  const auto xv = tape.variable(x);
  const auto logits = model.forward(tape, xv);
  const std::size_t b = logits.shape()[0], k = logits.shape()[1];
  detail::check_labels(t, b, k);
  Tensor<T> pick({b, k}, T(0));
  for (std::size_t i = 0; i < b; ++i) pick[i * k + t[i]] = T(1);
  return tape.gradient(sum(mul(logits, tape.constant(std::move(pick)))), {xv})[0].value();
}

/// Per-example sums of |v| over all but the first axis.
template <Real T>
std::vector<double> per_example_l1(const Tensor<T>& v) {
  const std::size_t b = v.dim(0), per = v.size() / std::max<std::size_t>(b, 1);
  std::vector<double> out(b, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < per; ++j) out[i] += std::abs(static_cast<double>(v[i * per + j]));
  return out;
}

template <Real T>
std::vector<double> per_example_l2(const Tensor<T>& v) {
  const std::size_t b = v.dim(0), per = v.size() / std::max<std::size_t>(b, 1);
  std::vector<double> out(b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < per; ++j) out[i] += static_cast<double>(v[i * per + j]) * v[i * per + j];
    out[i] = std::sqrt(out[i]);
  }
  return out;
}

}  // namespace robustgrad
