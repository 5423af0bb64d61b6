#pragma once

#include <array>
#include <span>
#include <vector>

#include "robustgrad/attacks.hpp"
#include "robustgrad/diagnostics/curvature.hpp"

namespace robustgrad {

/// Dataset means at x(eps) = x + (eps / base) (attack(x) - x).
struct DirectionPoint {
  double epsilon = 0;
  double mean_loss = 0;
  double mean_grad_l1 = 0;
  double mean_curvature = 0;  // over examples with a non-vanishing gradient
  double accuracy = 0;
};

/// The attack runs once per shard with Rng::derive(opt.seed, shard), the same stream
/// robust_accuracy uses, and every grid point reuses its result. Grid values may exceed
/// the base budget.
template <Real T, Classifier<T> M>
std::vector<DirectionPoint> attack_direction_sweep(const M& model, const Dataset<T>& data, const AttackConfig& attack,
                                                   std::span<const double> eps_grid,
                                                   const PowerIterationConfig& power = {},
                                                   const EvalOptions& opt = {}) {
  attack.validate();
  power.validate();
  if (!(attack.epsilon > 0)) throw Error("direction sweep needs a positive base epsilon");
  for (double e : eps_grid)
    if (!(e >= 0)) throw Error("direction sweep epsilon must be >= 0");
  const std::size_t n = detail::example_count(data, opt);
  const std::size_t shards = detail::shard_count(n, opt);
  const std::size_t g = eps_grid.size();
  // Per shard and grid point: sums of loss, grad l1, curvature, curvature count, correct.
  std::vector<std::vector<std::array<double, 5>>> sums(shards, std::vector<std::array<double, 5>>(g));
  detail::for_each_shard(data, opt, [&](std::size_t s, std::size_t, const Tensor<T>& x, std::span<const std::size_t> y) {
    Rng rng = Rng::derive(opt.seed, s);
    const auto adv = run_attack(model, x, y, attack, rng).adversarial;
    for (std::size_t k = 0; k < g; ++k) {
      const double t = eps_grid[k] / attack.epsilon;
      Tensor<T> xt = x;
      if (t == 1) {
        xt = adv;
      } else if (t != 0) {
        for (std::size_t i = 0; i < xt.size(); ++i) xt[i] = static_cast<T>(x[i] + t * (adv[i] - x[i]));
      }
      const auto grad = loss_input_gradient(model, xt, y);
      const auto l1 = per_example_l1(grad.gradient);
      const auto pred = argmax_rows(grad.logits);
      PowerIterationConfig pc = power;
      pc.seed = Rng::derive(power.seed, s).next_u64();
      const auto curv = normalized_curvature(model, xt, y, pc);
      auto& acc = sums[s][k];
      for (std::size_t i = 0; i < y.size(); ++i) {
        acc[0] += grad.loss[i];
        acc[1] += l1[i];
        if (curv[i].curvature) {
          acc[2] += *curv[i].curvature;
          acc[3] += 1;
        }
        acc[4] += pred[i] == y[i];
      }
    }
  });
  std::vector<DirectionPoint> out(g);
  for (std::size_t k = 0; k < g; ++k) {
    std::array<double, 5> t{};
    for (std::size_t s = 0; s < shards; ++s)
      for (std::size_t j = 0; j < 5; ++j) t[j] += sums[s][k][j];
    const double dn = static_cast<double>(n);
    out[k] = {eps_grid[k], t[0] / dn, t[1] / dn, t[3] > 0 ? t[2] / t[3] : 0.0, t[4] / dn};
  }
  return out;
}

}  // namespace robustgrad
