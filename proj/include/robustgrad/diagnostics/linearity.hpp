#pragma once

#include <span>
#include <vector>

#include "robustgrad/diagnostics/gradient_stats.hpp"
#include "robustgrad/diagnostics/histogram.hpp"

namespace robustgrad {

struct LinearityProbe {
  std::size_t samples_per_example = 8;
  double epsilon = 4.0 / 255.0;

  void validate() const {
    if (samples_per_example < 1) throw Error("linearity probe needs at least one sample");
    if (!(epsilon >= 0)) throw Error("linearity probe epsilon must be >= 0");
  }
};

/// |a L(x+e1) + (1-a) L(x+e2) - L(x + a e1 + (1-a) e2)|^2 per example for one draw.
/// `loss(batch)` returns one value per row; alpha holds one coefficient per row.
template <Real T, class LossFn>
std::vector<double> linearity_sample_error(LossFn&& loss, const Tensor<T>& x, std::span<const double> alpha,
                                           const Tensor<T>& eta1, const Tensor<T>& eta2) {
  if (eta1.shape() != x.shape() || eta2.shape() != x.shape()) throw ShapeMismatch("linearity perturbation shape");
  const std::size_t b = x.dim(0), per = x.size() / std::max<std::size_t>(b, 1);
  if (alpha.size() != b) throw ShapeMismatch("one alpha per example");
  Tensor<T> x1 = x, x2 = x, xm = x;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < per; ++j) {
      const std::size_t k = i * per + j;
      x1[k] += eta1[k];
      x2[k] += eta2[k];
      xm[k] += static_cast<T>(alpha[i] * eta1[k] + (1 - alpha[i]) * eta2[k]);
    }
  const std::vector<double> l1 = loss(x1), l2 = loss(x2), lm = loss(xm);
  std::vector<double> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const double d = alpha[i] * l1[i] + (1 - alpha[i]) * l2[i] - lm[i];
    out[i] = d * d;
  }
  return out;
}

/// Monte Carlo mean of the sample error with alpha ~ U(0,1) and eta ~ U(-eps, eps)^d.
template <Real T, class LossFn>
std::vector<double> local_linearity_error(LossFn&& loss, const Tensor<T>& x, const LinearityProbe& probe, Rng& rng) {
  probe.validate();
  const std::size_t b = x.dim(0);
  std::vector<double> acc(b, 0.0), alpha(b);
  Tensor<T> e1(x.shape()), e2(x.shape());
  for (std::size_t s = 0; s < probe.samples_per_example; ++s) {
    for (auto& a : alpha) a = rng.uniform();
    for (auto& v : e1.data()) v = static_cast<T>(rng.uniform(-probe.epsilon, probe.epsilon));
    for (auto& v : e2.data()) v = static_cast<T>(rng.uniform(-probe.epsilon, probe.epsilon));
    const auto err = linearity_sample_error(loss, x, alpha, e1, e2);
    for (std::size_t i = 0; i < b; ++i) acc[i] += err[i];
  }
  for (auto& v : acc) v /= static_cast<double>(probe.samples_per_example);
  return acc;
}

/// Per-example cross entropy of `model` as a batch function.
template <Real T, Classifier<T> M>
auto cross_entropy_fn(const M& model, std::span<const std::size_t> y) {
  return [&model, y](const Tensor<T>& xb) {
    Tape<T> tape;
    typename Tape<T>::NoGradGuard off(tape);
    return per_example_cross_entropy(model.forward(tape, tape.constant(xb)).value(), y);
  };
}

template <Real T, Classifier<T> M>
std::vector<double> local_linearity_error(const M& model, const Tensor<T>& x, std::span<const std::size_t> y,
                                          const LinearityProbe& probe, Rng& rng) {
  return local_linearity_error(cross_entropy_fn<T>(model, y), x, probe, rng);
}

struct LinearityStats {
  LinearityProbe probe;
  double mean = 0;
  LogSummary log_error;
  std::vector<double> examples;
};

/// Shard s draws from Rng::derive(seed, s).
template <Real T, Classifier<T> M>
LinearityStats linearity_stats(const M& model, const Dataset<T>& data, const LinearityProbe& probe,
                               const EvalOptions& opt = {}) {
  probe.validate();
  const std::size_t shards = detail::shard_count(detail::example_count(data, opt), opt);
  std::vector<std::vector<double>> parts(shards);
  detail::for_each_shard(data, opt, [&](std::size_t s, std::size_t, const Tensor<T>& x, std::span<const std::size_t> y) {
    Rng rng = Rng::derive(opt.seed, s);
    parts[s] = local_linearity_error(model, x, y, probe, rng);
  });
  LinearityStats out;
  out.probe = probe;
  for (auto& p : parts) out.examples.insert(out.examples.end(), p.begin(), p.end());
  for (double v : out.examples) out.mean += v;
  out.mean /= static_cast<double>(out.examples.size());
  out.log_error = log_summary(out.examples);
  return out;
}

}  // namespace robustgrad
