#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "robustgrad/attacks.hpp"
#include "robustgrad/data/dataset.hpp"
#include "robustgrad/diagnostics/histogram.hpp"
#include "robustgrad/gradients.hpp"
#include "robustgrad/parallel.hpp"

namespace robustgrad {

namespace detail {

/// Calls f(shard, begin, x, y) for fixed-size shards of the first n examples. Shards are
/// independent so results land in per-shard slots and are reduced in order by the caller.
template <Real T, class F>
std::size_t for_each_shard(const Dataset<T>& data, const EvalOptions& opt, F&& f) {
  const std::size_t n = opt.limit ? std::min(opt.limit, data.size()) : data.size();
  if (n == 0) throw EmptyDataset("diagnostics on an empty dataset");
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  const std::size_t shards = (n + bs - 1) / bs;
  parallel_for(shards, opt.threads, [&](std::size_t s) {
    const std::size_t begin = s * bs, count = std::min(bs, n - begin);
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
    const auto x = data.gather(idx);
    const auto y = data.gather_labels(idx);
    f(s, begin, x, std::span<const std::size_t>(y));
  });
  return shards;
}

inline std::size_t shard_count(std::size_t n, const EvalOptions& opt) {
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  return (n + bs - 1) / bs;
}

template <Real T>
std::size_t example_count(const Dataset<T>& data, const EvalOptions& opt) {
  return opt.limit ? std::min(opt.limit, data.size()) : data.size();
}

}  // namespace detail

/// Clean-input loss gradient L1 norms split by the outcome of an attack. "Success" is the
/// model's: the attack failed and the prediction survived. Failure means the attack won.
struct GradientStats {
  std::size_t count = 0;
  double mean_l1 = 0;
  std::optional<double> mean_l1_given_success;
  std::optional<double> mean_l1_given_failure;
  std::size_t count_success = 0;
  std::size_t count_failure = 0;
  LogHistogram histogram;
  std::vector<double> l1;
  std::vector<std::uint8_t> attack_success;
};

/// `attack_success[i]` is 1 where the attack fooled the model on example i.
inline GradientStats summarize_gradient_norms(std::span<const double> l1, std::span<const std::uint8_t> attack_success,
                                              const LogHistogram& layout = {}) {
  if (l1.size() != attack_success.size()) throw ShapeMismatch("norms vs success mask");
  GradientStats s;
  s.count = l1.size();
  s.histogram = layout;
  s.histogram.reset();
  s.l1.assign(l1.begin(), l1.end());
  s.attack_success.assign(attack_success.begin(), attack_success.end());
  double all = 0, ok = 0, broken = 0;
  for (std::size_t i = 0; i < l1.size(); ++i) {
    if (l1[i] < 0) throw Error("gradient norm must be non-negative");
    all += l1[i];
    s.histogram.add(l1[i]);
    if (attack_success[i]) {
      broken += l1[i];
      ++s.count_failure;
    } else {
      ok += l1[i];
      ++s.count_success;
    }
  }
  if (s.count) s.mean_l1 = all / static_cast<double>(s.count);
  if (s.count_success) s.mean_l1_given_success = ok / static_cast<double>(s.count_success);
  if (s.count_failure) s.mean_l1_given_failure = broken / static_cast<double>(s.count_failure);
  return s;
}

template <Real T, Classifier<T> M>
GradientStats gradient_norm_stats(const M& model, const Dataset<T>& data, const AttackConfig& cfg,
                                  const EvalOptions& opt = {}, const LogHistogram& layout = {}) {
  const auto ev = robust_accuracy(model, data, cfg, opt);
  std::vector<double> l1;
  l1.reserve(ev.examples.size());
  for (const auto& e : ev.examples) l1.push_back(e.grad_l1);
  const auto mask = ev.success_mask();
  return summarize_gradient_norms(l1, mask, layout);
}

/// L1 norm histograms of the clean loss gradient, split by whether the clean prediction
/// is correct.
struct CorrectnessHistograms {
  LogHistogram correct;
  LogHistogram incorrect;
  LogHistogram all;
};

inline CorrectnessHistograms split_by_correctness(std::span<const double> l1, std::span<const std::uint8_t> correct,
                                                  const LogHistogram& layout = {}) {
  if (l1.size() != correct.size()) throw ShapeMismatch("norms vs correctness mask");
  CorrectnessHistograms h{layout, layout, layout};
  h.correct.reset();
  h.incorrect.reset();
  h.all.reset();
  for (std::size_t i = 0; i < l1.size(); ++i) {
    (correct[i] ? h.correct : h.incorrect).add(l1[i]);
    h.all.add(l1[i]);
  }
  return h;
}

template <Real T, Classifier<T> M>
CorrectnessHistograms correctness_conditioned_norm_distribution(const M& model, const Dataset<T>& data,
                                                                const EvalOptions& opt = {},
                                                                const LogHistogram& layout = {}) {
  const std::size_t shards = detail::shard_count(detail::example_count(data, opt), opt);
  std::vector<std::vector<double>> l1(shards);
  std::vector<std::vector<std::uint8_t>> ok(shards);
  detail::for_each_shard(data, opt, [&](std::size_t s, std::size_t, const Tensor<T>& x, std::span<const std::size_t> y) {
    const auto g = loss_input_gradient(model, x, y);
    l1[s] = per_example_l1(g.gradient);
    const auto pred = argmax_rows(g.logits);
    for (std::size_t i = 0; i < y.size(); ++i) ok[s].push_back(pred[i] == y[i]);
  });
  std::vector<double> all_l1;
  std::vector<std::uint8_t> all_ok;
  for (std::size_t s = 0; s < shards; ++s) {
    all_l1.insert(all_l1.end(), l1[s].begin(), l1[s].end());
    all_ok.insert(all_ok.end(), ok[s].begin(), ok[s].end());
  }
  return split_by_correctness(all_l1, all_ok, layout);
}

/// One histogram per channel of |g| over every entry of a [B,C,H,W] gradient.
template <Real T>
std::vector<LogHistogram> channel_histograms(const Tensor<T>& g, const LogHistogram& layout = {}) {
  if (g.rank() != 4) throw ShapeMismatch("channel histograms expect [B,C,H,W]");
  const std::size_t b = g.dim(0), c = g.dim(1), hw = g.dim(2) * g.dim(3);
  std::vector<LogHistogram> out(c, layout);
  for (auto& h : out) h.reset();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[ch].add(static_cast<double>(g[(n * c + ch) * hw + p]));
  return out;
}

template <Real T, Classifier<T> M>
std::vector<LogHistogram> channel_magnitude_histogram(const M& model, const Dataset<T>& data,
                                                      const EvalOptions& opt = {}, const LogHistogram& layout = {}) {
  const std::size_t shards = detail::shard_count(detail::example_count(data, opt), opt);
  std::vector<std::vector<LogHistogram>> parts(shards);
  detail::for_each_shard(data, opt, [&](std::size_t s, std::size_t, const Tensor<T>& x, std::span<const std::size_t> y) {
    parts[s] = channel_histograms(loss_input_gradient(model, x, y).gradient, layout);
  });
  std::vector<LogHistogram> out = parts[0];
  for (std::size_t s = 1; s < shards; ++s)
    for (std::size_t ch = 0; ch < out.size(); ++ch) out[ch] += parts[s][ch];
  return out;
}

}  // namespace robustgrad
