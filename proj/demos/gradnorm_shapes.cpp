// Trains the same small CNN naturally and with the gradient-norm penalty on synthetic
// shapes, then compares PGD accuracy and the loss geometry around test points.

#include <cstdio>

#include "robustgrad.hpp"

using namespace robustgrad;

int main() {
  SyntheticSpec spec;
  spec.image_size = 12;
  spec.samples = 1500;
  spec.seed = 1;
  const auto [train_set, test_set] = train_val_split(synthesize<double>(spec), 300);

  Rng rng(3);
  const Network<double> init(*network_preset("cnn-small", ActivationKind::gelu, {1, 12, 12}, 10), rng);
  const auto attack = AttackConfig::pgd(0.1, 20);

  for (auto kind : {ObjectiveKind::natural, ObjectiveKind::gradnorm}) {
    TrainingConfig tc;
    tc.objective.kind = kind;
    tc.objective.gradnorm.epsilon = 0.1;
    tc.objective.gradnorm.sigma = 1.0;
    tc.epochs = 6;
    tc.schedule.base_lr = 2e-3;
    tc.warmup_reg_epochs = 2;
    tc.evaluate_each_epoch = false;
    const auto res = train(init, train_set, test_set, tc);

    const auto ev = robust_accuracy(res.net, test_set, attack);
    EvalOptions some;
    some.limit = 50;
    const auto geo = geometry_stats(res.net, test_set, PowerIterationConfig{}, some);
    std::printf("%-9s clean %.3f  pgd-20 %.3f  |H| %.3g  curvature %.3g  (%.0f s)\n",
                kind == ObjectiveKind::natural ? "natural" : "gradnorm", ev.clean_accuracy, ev.robust_accuracy,
                geo.hess_spec, geo.curvature, res.log.wall_seconds);
  }
}
