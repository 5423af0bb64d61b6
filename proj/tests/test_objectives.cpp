#include <gtest/gtest.h>

#include <cmath>

#include "robustgrad/autodiff.hpp"
#include "robustgrad/gradients.hpp"
#include "robustgrad/objectives.hpp"
#include "test_util.hpp"

namespace robustgrad {
namespace {

Tensor<double> random_tensor(Shape s, std::uint64_t seed, double lo = 0, double hi = 1) {
  Rng r(seed);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = r.uniform(lo, hi);
  return t;
}

Network<double> make(const std::string& preset, ActivationKind act, Shape in, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  return Network<double>(*network_preset(preset, act, in, k), rng);
}

double ce_of(const std::vector<double>& z, std::size_t y, double s) {
  double m = *std::max_element(z.begin(), z.end()), lse = 0;
  for (double v : z) lse += std::exp(v - m);
  lse = m + std::log(lse);
  double out = 0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double q = (k == y ? 1 - s : 0) + s / static_cast<double>(z.size());
    out -= q * (z[k] - lse);
  }
  return out;
}

double ce_value(const Tensor<double>& logits, const std::vector<std::size_t>& y, double s = 0) {
  Tape<double> t;
  return cross_entropy(t.constant(logits), y, s).item();
}

TEST(CrossEntropy, UniformLogits) {
  EXPECT_NEAR(ce_value(Tensor<double>({3, 10}, 0.7), {0, 4, 9}), std::log(10.0), 1e-15);
}

TEST(CrossEntropy, LargeMarginIsZero) {
  EXPECT_LT(ce_value(Tensor<double>({1, 3}, std::vector<double>{800, 0, 0}), {0}), 1e-300);
}

TEST(CrossEntropy, SmoothedTwoClass) {
  const double oracle = ce_of({2, 0}, 0, 0.1);
  EXPECT_NEAR(oracle, -0.95 * std::log(1 / (1 + std::exp(-2.0))) - 0.05 * std::log(1 / (1 + std::exp(2.0))), 1e-15);
  EXPECT_NEAR(ce_value(Tensor<double>({1, 2}, std::vector<double>{2, 0}), {0}, 0.1), oracle, 1e-15);
  EXPECT_NEAR(oracle, 0.226928, 1e-6);
}

TEST(CrossEntropy, MatchesOracleOnRandomBatches) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto z = random_tensor({4, 5}, seed, -6, 6);
    std::vector<std::size_t> y{seed % 5, 1, 4, 0};
    const double s = 0.03 * static_cast<double>(seed % 4);
    double ref = 0;
    for (std::size_t i = 0; i < 4; ++i)
      ref += ce_of(std::vector<double>(z.data().begin() + static_cast<long>(5 * i), z.data().begin() + static_cast<long>(5 * i + 5)), y[i], s);
    EXPECT_NEAR(ce_value(z, y, s), ref / 4, 1e-13);
  }
}

TEST(CrossEntropy, Errors) {
  const Tensor<double> z({2, 3}, 0.0);
  EXPECT_THROW(ce_value(z, {0, 3}), LabelOutOfRange);
  EXPECT_THROW(ce_value(z, {0}), Error);
  EXPECT_THROW(ce_value(z, {0, 1}, 1.0), Error);
  EXPECT_THROW(ce_value(z, {0, 1}, -0.1), Error);
}

TEST(CrossEntropy, PerExampleMatchesOracle) {
  const auto z = random_tensor({3, 4}, 7, -3, 3);
  const std::vector<std::size_t> y{2, 0, 3};
  const auto per = per_example_cross_entropy(z, y);
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_NEAR(per[i], ce_of({z[4 * i], z[4 * i + 1], z[4 * i + 2], z[4 * i + 3]}, y[i], 0), 1e-14);
}

TEST(Softmax, TemperatureHalf) {
  const auto p = softmax_row(Tensor<double>({1, 2}, std::vector<double>{2, 0}), 0, 0.5);
  EXPECT_NEAR(p[0], 1 / (1 + std::exp(-4.0)), 1e-15);
  EXPECT_NEAR(p[0], 0.98201, 1e-5);
  EXPECT_NEAR(p[1], 0.01799, 1e-5);
}

TEST(GradNorm, HandArithmeticFromConstants) {
  const GradNormConfig cfg;
  EXPECT_NEAR(cfg.epsilon / cfg.sigma, 0.0697167, 1e-7);
  EXPECT_NEAR(cfg.lambda_ce * 2.0 + cfg.penalty_scale() * 10.0, 0.8 * 2.0 + 1.2 * (4.0 / 255 / 0.225) * 10, 1e-15);
  EXPECT_NEAR(cfg.lambda_ce * 2.0 + cfg.penalty_scale() * 10.0, 2.43660, 1e-4);
}

struct Fixture {
  Network<double> net;
  Tensor<double> x;
  std::vector<std::size_t> y;
};

Fixture cnn_fixture(std::uint64_t seed, std::size_t c = 1) {
  auto net = make("cnn-small", ActivationKind::gelu, {c, 8, 8}, 4, seed);
  net.set_normalization(Normalization::uniform(c, 0.4, 0.3));
  return {std::move(net), random_tensor({3, c, 8, 8}, seed + 100), {1, 3, 0}};
}

LossTerms<double> eval_gradnorm(const Network<double>& net, Tape<double>& t, const Tensor<double>& x,
                                const std::vector<std::size_t>& y, const GradNormConfig& cfg,
                                std::vector<Var<double>>* params_out = nullptr) {
  const auto params = net.bind(t, params_out != nullptr);
  if (params_out) *params_out = params;
  Rng rng(0);
  return gradnorm_loss(net, t, std::span<const Var<double>>(params), x, y, cfg, rng);
}

TEST(GradNorm, TermsMatchIndependentInputGradient) {
  auto f = cnn_fixture(1);
  Tape<double> t;
  const GradNormConfig cfg;
  const auto terms = eval_gradnorm(f.net, t, f.x, f.y, cfg);
  const auto ig = loss_input_gradient(f.net, f.x, f.y);
  // Gradient w.r.t. the normalized input is the raw gradient times sigma.
  double l1 = 0;
  for (double v : per_example_l1(ig.gradient)) l1 += v * 0.3;
  l1 /= 3;
  double ce = 0;
  for (double v : ig.loss) ce += v;
  ce /= 3;
  EXPECT_NEAR(terms.grad_l1, l1, 1e-12 * l1);
  EXPECT_NEAR(terms.ce, ce, 1e-13);
  EXPECT_NEAR(terms.loss.item(), 0.8 * ce + cfg.penalty_scale() * l1, 1e-12);
}

TEST(GradNorm, ZeroPenaltyWeightIsCrossEntropy) {
  auto f = cnn_fixture(2);
  GradNormConfig cfg;
  cfg.lambda_gn = 0;
  cfg.lambda_ce = 1;
  Tape<double> t;
  const double loss = eval_gradnorm(f.net, t, f.x, f.y, cfg).loss.item();
  EXPECT_EQ(loss, ce_value(predict_logits(f.net, f.x), f.y));
}

TEST(GradNorm, UnitChannelWeightsAreExact) {
  auto f = cnn_fixture(3, 3);
  GradNormConfig plain, ones, green;
  ones.channel_weights = {1, 1, 1};
  green.channel_weights = {1, 2, 1};
  Tape<double> t;
  EXPECT_EQ(eval_gradnorm(f.net, t, f.x, f.y, plain).loss.item(), eval_gradnorm(f.net, t, f.x, f.y, ones).loss.item());
  const auto ig = loss_input_gradient(f.net, f.x, f.y);
  double l1 = 0;
  for (std::size_t i = 0; i < ig.gradient.size(); ++i) l1 += std::abs(ig.gradient[i]) * 0.3 * ((i / 64) % 3 == 1 ? 2 : 1);
  EXPECT_NEAR(eval_gradnorm(f.net, t, f.x, f.y, green).grad_l1, l1 / 3, 1e-12 * l1);
  green.channel_weights = {1, 2};
  EXPECT_THROW(eval_gradnorm(f.net, t, f.x, f.y, green), ShapeMismatch);
  green.channel_weights = {1, 0, 1};
  EXPECT_THROW(eval_gradnorm(f.net, t, f.x, f.y, green), Error);
}

// For a linear softmax model the loss-input gradient is sum_k (p_k - [k = y]) w_k.
TEST(GradNorm, LinearSoftmaxClosedForm) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto net = make("linear", ActivationKind::relu, {1, 3, 3}, 3, seed);
    auto& w = net.parameters()[0].value;
    for (auto& v : w.data()) v = Rng(seed + 50).uniform(-1, 1) + v;
    const auto x = random_tensor({2, 1, 3, 3}, seed + 9);
    const std::vector<std::size_t> y{seed % 3, 2};
    const auto logits = predict_logits(net, x);
    double l1 = 0;
    for (std::size_t i = 0; i < 2; ++i) {
      const auto p = softmax_row(logits, i);
      for (std::size_t j = 0; j < 9; ++j) {
        double g = 0;
        for (std::size_t k = 0; k < 3; ++k) g += (p[k] - (k == y[i] ? 1.0 : 0.0)) * w[k * 9 + j];
        l1 += std::abs(g);
      }
    }
    Tape<double> t;
    EXPECT_NEAR(eval_gradnorm(net, t, x, y, GradNormConfig{}).grad_l1, l1 / 2, 1e-13);
  }
}

TEST(GradNorm, MonotoneInPenaltyAtFixedCrossEntropy) {
  // Two linear models with identical logits at x but different weight L1 mass.
  const Tensor<double> x({1, 1, 3, 3}, std::vector<double>{1, 1, 0, 0, 0, 0, 0, 0, 0});
  auto a = make("linear", ActivationKind::relu, {1, 3, 3}, 2, 1);
  auto b = a;
  for (auto* n : {&a, &b})
    for (auto& p : n->parameters()) p.value = Tensor<double>(p.value.shape(), 0.0);
  a.parameters()[0].value[0] = 1;
  b.parameters()[0].value[0] = 2;
  b.parameters()[0].value[1] = -1;
  b.parameters()[0].value[5] = 3;
  Tape<double> t;
  const auto la = eval_gradnorm(a, t, x, {1}, GradNormConfig{});
  const auto lb = eval_gradnorm(b, t, x, {1}, GradNormConfig{});
  EXPECT_DOUBLE_EQ(la.ce, lb.ce);
  EXPECT_GT(lb.grad_l1, la.grad_l1);
  EXPECT_GT(lb.loss.item(), la.loss.item());
}

TEST(GradNorm, DoubleBackpropMatchesFiniteDifferences) {
  auto f = cnn_fixture(4);
  const GradNormConfig cfg;
  Tape<double> t;
  std::vector<Var<double>> params;
  const auto terms = eval_gradnorm(f.net, t, f.x, f.y, cfg, &params);
  const auto grads = t.gradient(terms.loss, std::span<const Var<double>>(params));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto fd = finite_difference_gradient<double>(
        [&](const Tensor<double>& p) {
          auto copy = f.net;
          copy.parameters()[pi].value = p;
          Tape<double> s;
          return eval_gradnorm(copy, s, f.x, f.y, cfg).loss.item();
        },
        f.net.parameters()[pi].value, 1e-5);
    testing::expect_close(grads[pi].value(), fd, 1e-4, 1e-7);
  }
}

TEST(GradNorm, GaussianNoiseChangesInputOnly) {
  auto f = cnn_fixture(5);
  GradNormConfig noisy;
  noisy.input_noise = GaussianNoise{0.05};
  Tape<double> t;
  const auto clean = eval_gradnorm(f.net, t, f.x, f.y, GradNormConfig{});
  const auto a = eval_gradnorm(f.net, t, f.x, f.y, noisy);
  const auto b = eval_gradnorm(f.net, t, f.x, f.y, noisy);
  EXPECT_NE(a.loss.item(), clean.loss.item());
  EXPECT_EQ(a.loss.item(), b.loss.item());
}

// Linear map whose every class row equals `row`, so grad_x f_t = row for any t.
Network<double> constant_gradient_net(const Tensor<double>& row, std::size_t k) {
  auto net = make("linear", ActivationKind::relu, {1, 5, 5}, k, 0);
  auto& w = net.parameters()[0].value;
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < 25; ++j) w[c * 25 + j] = row[j] * (1.0 + 0.0 * static_cast<double>(c));
  net.parameters()[1].value = Tensor<double>({k}, 0.0);
  return net;
}

Tensor<double> step_image() {
  Tensor<double> x({1, 1, 5, 5}, 0.0);
  for (std::size_t i = 0; i < 5; ++i) x[i * 5 + 3] = x[i * 5 + 4] = 1;
  return x;
}

double edge_loss(const Network<double>& net, const Tensor<double>& x, std::size_t* skipped = nullptr,
                 std::uint64_t seed = 0) {
  Tape<double> t;
  const auto params = net.bind(t, false);
  Rng rng(seed);
  const auto terms = edge_reg_loss(net, t, std::span<const Var<double>>(params), x, EdgeRegConfig{}, rng);
  if (skipped) *skipped = terms.skipped;
  return terms.loss.item();
}

TEST(EdgeReg, ParallelGradientGivesZero) {
  const auto x = step_image();
  const auto e = oriented_energy(x);
  Tensor<double> row({25});
  for (std::size_t j = 0; j < 25; ++j) row[j] = 3 * e[j];
  EXPECT_NEAR(edge_loss(constant_gradient_net(row, 3), x), 0.0, 1e-15);
}

TEST(EdgeReg, OrthogonalGradientGivesOne) {
  const auto x = step_image();
  Tensor<double> row({25}, 0.0);
  row[0] = 1;  // column 0 is flat, its edge energy is 0
  row[5] = -2;
  EXPECT_NEAR(edge_loss(constant_gradient_net(row, 3), x), 1.0, 1e-15);
  for (std::size_t j = 0; j < 25; ++j) row[j] = -oriented_energy(x)[j];
  EXPECT_NEAR(edge_loss(constant_gradient_net(row, 3), x), 2.0, 1e-15);
}

TEST(EdgeReg, FlatImageIsSkipped) {
  std::size_t skipped = 0;
  Tensor<double> x({2, 1, 5, 5}, 0.5);
  for (std::size_t j = 0; j < 25; ++j) x[25 + j] = step_image()[j];
  Tensor<double> row({25}, 1.0);
  EXPECT_NO_THROW(edge_loss(constant_gradient_net(row, 2), x, &skipped));
  EXPECT_EQ(skipped, 1u);
}

TEST(EdgeReg, LossIsInRangeAndDifferentiable) {
  auto f = cnn_fixture(6);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const double l = edge_loss(f.net, random_tensor({3, 1, 8, 8}, seed), nullptr, seed);
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 2.0);
  }
  Tape<double> t;
  const auto params = f.net.bind(t, true);
  Rng rng(1);
  const auto terms = edge_reg_loss(f.net, t, std::span<const Var<double>>(params), f.x, EdgeRegConfig{}, rng);
  const auto g = t.gradient(terms.loss, std::span<const Var<double>>(params));
  double total = 0;
  for (const auto& v : g)
    for (double e : v.value().data()) total += std::abs(e);
  EXPECT_GT(total, 0);
}

TEST(EdgeReg, SampledClassFollowsTemperatureSoftmax) {
  // Two classes with logits (2, 0) at x: class 0 has gradient along the edge map, class 1 against it.
  const auto x = step_image();
  const auto e = oriented_energy(x);
  auto net = make("linear", ActivationKind::relu, {1, 5, 5}, 2, 0);
  auto& w = net.parameters()[0].value;
  for (std::size_t j = 0; j < 25; ++j) {
    w[j] = e[j];
    w[25 + j] = -e[j];
  }
  double s = 0;
  for (std::size_t j = 0; j < 25; ++j) s += e[j] * x[j];
  net.parameters()[1].value = Tensor<double>({2}, std::vector<double>{1 - s, -1 + s});
  ASSERT_NEAR(predict_logits(net, x)[0], 1.0 + 0.0, 1e-12);
  ASSERT_NEAR(predict_logits(net, x)[1], -1.0, 1e-12);
  const int n = 4000;
  double mean = 0;
  for (int r = 0; r < n; ++r) mean += edge_loss(net, x, nullptr, static_cast<std::uint64_t>(r));
  mean /= n;
  // Loss is 0 for class 0 and 2 for class 1, so the mean is 2 * P(t = 1).
  const double p1 = 1 / (1 + std::exp(4.0));
  EXPECT_NEAR(mean, 2 * p1, 4 * 2 * std::sqrt(p1 * (1 - p1) / n));
}

TEST(Edges, SobelStepEdge) {
  const auto e = oriented_energy(step_image());
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(e[i * 5 + 0], 0.0);
    EXPECT_EQ(e[i * 5 + 1], 0.0);
    EXPECT_EQ(e[i * 5 + 2], 16.0);
    EXPECT_EQ(e[i * 5 + 3], 16.0);
    EXPECT_EQ(e[i * 5 + 4], 0.0);
  }
}

TEST(Edges, TransposeSymmetryAndChannelSum) {
  const auto x = random_tensor({2, 6, 6}, 3);
  Tensor<double> xt(x.shape());
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) xt[(c * 6 + j) * 6 + i] = x[(c * 6 + i) * 6 + j];
  for (auto f : {EdgeFilter::sobel(), EdgeFilter::gaussian_derivative(0.8)}) {
    const auto e = oriented_energy(x, f), et = oriented_energy(xt, f);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(et[j * 6 + i], e[i * 6 + j], 1e-12);
    Tensor<double> c0({1, 6, 6}), c1({1, 6, 6});
    std::copy_n(x.data().begin(), 36, c0.data().begin());
    std::copy_n(x.data().begin() + 36, 36, c1.data().begin());
    const auto e0 = oriented_energy(c0, f), e1 = oriented_energy(c1, f);
    for (std::size_t k = 0; k < 36; ++k) EXPECT_NEAR(e[k], e0[k] + e1[k], 1e-12);
  }
}

TEST(Edges, ConstantImageHasNoEnergy) {
  for (auto f : {EdgeFilter::sobel(), EdgeFilter::gaussian_derivative(1.5)}) {
    const auto e = oriented_energy(Tensor<double>({1, 7, 7}, 0.6), f);
    for (double v : e.data()) EXPECT_NEAR(v, 0.0, 1e-24);
  }
}

TEST(Edges, ParseFilters) {
  EXPECT_EQ(parse_edge_filter("sobel"), EdgeFilter::sobel());
  EXPECT_EQ(parse_edge_filter("gaussian-derivative"), EdgeFilter::gaussian_derivative(1.0));
  EXPECT_EQ(parse_edge_filter("gaussian-derivative:2.5"), EdgeFilter::gaussian_derivative(2.5));
  EXPECT_FALSE(parse_edge_filter("gaussian-derivative:x"));
  EXPECT_FALSE(parse_edge_filter("canny"));
  EXPECT_THROW(oriented_energy(Tensor<double>({1, 2, 5})), ShapeMismatch);
}

AdvTrainConfig adv(double eps, std::size_t k) {
  AdvTrainConfig a;
  a.attack = AttackConfig::pgd(eps, k);
  return a;
}

double adv_loss(const Network<double>& net, const Tensor<double>& x, const std::vector<std::size_t>& y,
                const AdvTrainConfig& cfg) {
  Tape<double> t;
  const auto params = net.bind(t, false);
  Rng rng(3);
  return adv_train_loss(net, t, std::span<const Var<double>>(params), x, y, cfg, rng).loss.item();
}

TEST(AdvTrain, ZeroEpsilonIsCleanCrossEntropy) {
  auto f = cnn_fixture(7);
  auto cfg = adv(0, 3);
  cfg.attack.step_size = 0;
  EXPECT_NEAR(adv_loss(f.net, f.x, f.y, cfg), ce_value(predict_logits(f.net, f.x), f.y), 1e-15);
}

TEST(AdvTrain, SingleStepOnLinearModelMatchesClosedForm) {
  auto net = make("linear", ActivationKind::relu, {1, 2, 2}, 2, 8);
  const Tensor<double> x({1, 1, 2, 2}, std::vector<double>{0.4, 0.5, 0.6, 0.5});
  const std::vector<std::size_t> y{0};
  const double eps = 0.05;
  const auto& w = net.parameters()[0].value;
  const auto p = softmax_row(predict_logits(net, x), 0);
  Tensor<double> xa = x;
  for (std::size_t j = 0; j < 4; ++j) {
    const double g = (p[0] - 1) * w[j] + p[1] * w[4 + j];
    xa[j] += eps * (g > 0 ? 1 : -1);
  }
  auto cfg = adv(eps, 1);
  cfg.attack.step_size = eps;
  EXPECT_NEAR(adv_loss(net, x, y, cfg), ce_value(predict_logits(net, xa), y), 1e-14);
}

TEST(AdvTrain, AdversarialLossExceedsClean) {
  for (std::uint64_t seed = 10; seed < 14; ++seed) {
    auto f = cnn_fixture(seed);
    EXPECT_GE(adv_loss(f.net, f.x, f.y, adv(8.0 / 255, 5)), ce_value(predict_logits(f.net, f.x), f.y));
  }
}

TEST(PassCount, MatchesPerBatchCosts) {
  auto f = cnn_fixture(20);
  ObjectiveConfig cfg;
  EXPECT_EQ(measure_pass_count(f.net, f.x, f.y, cfg).total(), 2u);
  cfg.kind = ObjectiveKind::gradnorm;
  EXPECT_EQ(measure_pass_count(f.net, f.x, f.y, cfg).total(), 5u);
  cfg.kind = ObjectiveKind::advtrain;
  EXPECT_EQ(measure_pass_count(f.net, f.x, f.y, cfg).total(), 8u);
  for (std::size_t k : {1u, 2u, 5u}) {
    cfg.adv.attack = AttackConfig::pgd(4.0 / 255, k);
    EXPECT_EQ(measure_pass_count(f.net, f.x, f.y, cfg).total(), 2 * k + 2);
  }
  const auto nat = measure_pass_count(f.net, f.x, f.y, ObjectiveConfig{});
  EXPECT_EQ(nat.forward, 1u);
  EXPECT_EQ(nat.backward, 1u);
}

TEST(Objective, ParseRoundTripAndDispatch) {
  for (auto k : {ObjectiveKind::natural, ObjectiveKind::gradnorm, ObjectiveKind::edgereg, ObjectiveKind::advtrain,
                 ObjectiveKind::fgsm_train}) {
    EXPECT_EQ(parse_objective(objective_name(k)), k);
  }
  EXPECT_FALSE(parse_objective("trades"));
  auto f = cnn_fixture(21);
  ObjectiveConfig cfg;
  cfg.kind = ObjectiveKind::edgereg;
  cfg.edge_weight = 0;
  Tape<double> t;
  const auto params = f.net.bind(t, false);
  Rng rng(0);
  const auto terms = objective_loss(f.net, t, std::span<const Var<double>>(params), f.x, f.y, cfg, rng);
  EXPECT_NEAR(terms.loss.item(), ce_value(predict_logits(f.net, f.x), f.y), 1e-14);
}

}  // namespace
}  // namespace robustgrad
