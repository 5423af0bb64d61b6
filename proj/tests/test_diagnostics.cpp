#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "robustgrad/data/synthetic.hpp"
#include "robustgrad/diagnostics/report.hpp"

namespace robustgrad {
namespace {

Tensor<double> random_tensor(Shape s, std::uint64_t seed, double lo = 0, double hi = 1) {
  Rng r(seed);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = r.uniform(lo, hi);
  return t;
}

Network<double> make(const std::string& preset, Shape in, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  return Network<double>(*network_preset(preset, ActivationKind::gelu, in, k), rng);
}

Network<double> tiny_mlp(std::uint64_t seed) {
  NetworkConfig cfg;
  cfg.input_shape = {1, 4, 4};
  cfg.num_classes = 3;
  cfg.activation = ActivationKind::gelu;
  cfg.normalization = Normalization::identity(1);
  cfg.layers = {LayerSpec::dense(6), LayerSpec::act(), LayerSpec::dense(5), LayerSpec::act()};
  Rng rng(seed);
  return Network<double>(cfg, rng);
}

Dataset<double> shapes(std::size_t n, std::size_t size, std::uint64_t seed) {
  SyntheticSpec s;
  s.samples = n;
  s.image_size = size;
  s.seed = seed;
  return synthesize<double>(s);
}

// Quadratic 0.5 * sum_i d_i x_i^2 for every row of x.
auto quadratic(std::vector<double> d) {
  return [d](Tape<double>& tape, const Var<double>& x) {
    Tensor<double> dd(x.shape());
    const std::size_t per = d.size();
    for (std::size_t i = 0; i < dd.size(); ++i) dd[i] = d[i % per];
    return scale(sum(mul(mul(x, x), tape.constant(std::move(dd)))), 0.5);
  };
}

TEST(LogHistogram, HandPlacement) {
  LogHistogram h(-2, 2, 1);
  EXPECT_EQ(h.bins(), 4u);
  // A hand 2x2 gradient.
  for (double v : {0.5, 0.02, 0.0, 300.0}) h.add(v);
  EXPECT_EQ(h.counts, (std::vector<std::size_t>{1, 1, 0, 0}));
  EXPECT_EQ(h.underflow, 1u);
  EXPECT_EQ(h.overflow, 1u);
  EXPECT_EQ(h.total(), 4u);
  EXPECT_EQ(h.edges(), (std::vector<double>{-2, -1, 0, 1, 2}));
  h.add(-0.5);  // magnitude
  EXPECT_EQ(h.counts[1], 2u);
  EXPECT_THROW(LogHistogram(1, 1, 4), Error);
}

TEST(LogHistogram, ZeroSitsAtTheFloor) {
  EXPECT_DOUBLE_EQ(safe_log10(0.0), -17.0);
  LogHistogram h(-17, 0, 1);
  h.add(0.0);
  EXPECT_EQ(h.counts[0], 1u);
}

TEST(GradientStats, HandConditionals) {
  const std::vector<double> l1{1, 2, 3, 4};
  const std::vector<std::uint8_t> attacked{0, 0, 1, 1};
  const auto s = summarize_gradient_norms(l1, attacked);
  EXPECT_DOUBLE_EQ(s.mean_l1, 2.5);
  ASSERT_TRUE(s.mean_l1_given_success && s.mean_l1_given_failure);
  EXPECT_DOUBLE_EQ(*s.mean_l1_given_success, 1.5);
  EXPECT_DOUBLE_EQ(*s.mean_l1_given_failure, 3.5);
  EXPECT_EQ(s.count_success + s.count_failure, s.count);
}

TEST(GradientStats, EmptyPartitionIsAbsent) {
  const std::vector<double> l1{0.5, 2, 7};
  const auto s = summarize_gradient_norms(l1, std::vector<std::uint8_t>{0, 0, 0});
  EXPECT_FALSE(s.mean_l1_given_failure.has_value());
  ASSERT_TRUE(s.mean_l1_given_success.has_value());
  EXPECT_DOUBLE_EQ(*s.mean_l1_given_success, s.mean_l1);
  const auto t = summarize_gradient_norms(l1, std::vector<std::uint8_t>{1, 1, 1});
  EXPECT_FALSE(t.mean_l1_given_success.has_value());
  EXPECT_THROW(summarize_gradient_norms(std::vector<double>{-1}, std::vector<std::uint8_t>{0}), Error);
}

TEST(GradientStats, ConditionalsRecombine) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r(seed);
    std::vector<double> l1(37);
    std::vector<std::uint8_t> m(37);
    for (std::size_t i = 0; i < l1.size(); ++i) {
      l1[i] = std::exp(r.uniform(-5, 5));
      m[i] = r.uniform() < 0.4;
    }
    m[0] = 0;
    m[1] = 1;
    const auto s = summarize_gradient_norms(l1, m);
    const double p = static_cast<double>(s.count_success) / static_cast<double>(s.count);
    EXPECT_NEAR(s.mean_l1, p * *s.mean_l1_given_success + (1 - p) * *s.mean_l1_given_failure, 1e-12 * s.mean_l1);
    EXPECT_EQ(s.histogram.total(), s.count);
  }
}

TEST(GradientStats, ModelLevelMatchesAttackRecords) {
  const auto net = make("cnn-small", {1, 8, 8}, 10, 3);
  const auto data = shapes(30, 8, 4);
  EvalOptions opt;
  opt.batch_size = 7;
  const auto s = gradient_norm_stats(net, data, AttackConfig::pgd(0.05, 3), opt);
  const auto ev = robust_accuracy(net, data, AttackConfig::pgd(0.05, 3), opt);
  ASSERT_EQ(s.count, 30u);
  for (std::size_t i = 0; i < s.count; ++i) {
    EXPECT_EQ(s.l1[i], ev.examples[i].grad_l1);
    EXPECT_EQ(s.attack_success[i], !ev.examples[i].adv_correct);
    EXPECT_GE(s.l1[i], 0);
  }
  const std::vector<std::size_t> idx{5};
  const auto g = loss_input_gradient(net, data.gather(idx), std::span<const std::size_t>(data.gather_labels(idx)));
  EXPECT_DOUBLE_EQ(s.l1[5], per_example_l1(g.gradient)[0]);
}

TEST(CorrectnessHistograms, HandCase) {
  const std::vector<double> l1{0.5, 5, 50};
  const std::vector<std::uint8_t> ok{1, 0, 1};
  const auto h = split_by_correctness(l1, ok, LogHistogram(-1, 2, 1));
  EXPECT_EQ(h.correct.counts, (std::vector<std::size_t>{1, 0, 1}));
  EXPECT_EQ(h.incorrect.counts, (std::vector<std::size_t>{0, 1, 0}));
  EXPECT_EQ(h.all.counts, (std::vector<std::size_t>{1, 1, 1}));
}

TEST(CorrectnessHistograms, PartitionTheFullHistogram) {
  const auto net = make("cnn-small", {1, 8, 8}, 10, 5);
  const auto data = shapes(25, 8, 6);
  const auto h = correctness_conditioned_norm_distribution(net, data);
  for (std::size_t b = 0; b < h.all.bins(); ++b) EXPECT_EQ(h.correct.counts[b] + h.incorrect.counts[b], h.all.counts[b]);
  EXPECT_EQ(h.correct.underflow + h.incorrect.underflow, h.all.underflow);
  EXPECT_EQ(h.all.total(), 25u);
}

TEST(CorrectnessHistograms, AllCorrectModelHasEmptyIncorrectHistogram) {
  // Logits (10 x0, 0): every positive-x0 example labelled 0 is classified correctly.
  auto net = make("linear", {1, 2, 2}, 2, 0);
  auto& W = net.parameters()[0].value;
  for (auto& v : W.data()) v = 0;
  W[0] = 10;
  Dataset<double> d;
  d.images = random_tensor({6, 1, 2, 2}, 7, 0.2, 1.0);
  d.labels.assign(6, 0);
  d.num_classes = 2;
  const auto h = correctness_conditioned_norm_distribution(net, d);
  EXPECT_EQ(h.incorrect.total(), 0u);
  EXPECT_EQ(h.correct.total(), 6u);
}

TEST(ChannelHistograms, ZeroChannelFallsToUnderflow) {
  auto net = make("linear", {2, 2, 2}, 3, 1);
  auto& W = net.parameters()[0].value;  // [K, C*H*W]
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 4; j < 8; ++j) W[k * 8 + j] = 0;
  Dataset<double> d;
  d.images = random_tensor({5, 2, 2, 2}, 8);
  d.labels = {0, 1, 2, 0, 1};
  d.num_classes = 3;
  d.normalization = Normalization::identity(2);
  const auto h = channel_magnitude_histogram(net, d);
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h[1].underflow, 20u);
  EXPECT_EQ(h[1].total(), 20u);
  EXPECT_EQ(h[0].total(), 20u);
  EXPECT_LT(h[0].underflow, 20u);
}

TEST(ChannelHistograms, ChannelPermutationPermutesHistograms) {
  auto net = make("linear", {2, 2, 2}, 3, 2);
  auto swapped = net;
  auto& W = net.parameters()[0].value;
  auto& S = swapped.parameters()[0].value;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < 4; ++j) {
      S[k * 8 + j] = W[k * 8 + 4 + j];
      S[k * 8 + 4 + j] = W[k * 8 + j];
    }
  Dataset<double> d;
  d.images = random_tensor({4, 2, 2, 2}, 9);
  d.labels = {0, 1, 2, 1};
  d.num_classes = 3;
  d.normalization = Normalization::identity(2);
  Dataset<double> p = d;
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t j = 0; j < 4; ++j) std::swap(p.images[n * 8 + j], p.images[n * 8 + 4 + j]);
  const auto a = channel_magnitude_histogram(net, d, {}, LogHistogram(-6, 2, 8));
  const auto b = channel_magnitude_histogram(swapped, p, {}, LogHistogram(-6, 2, 8));
  EXPECT_EQ(a[0], b[1]);
  EXPECT_EQ(a[1], b[0]);
}

TEST(Saliency, ChannelMaxOfAbsoluteGradient) {
  Tensor<double> g({3, 1, 1}, std::vector<double>{0.1, -0.5, 0.2});
  EXPECT_DOUBLE_EQ(channel_max_abs(g)[0], 0.5);
  // A linear model's logit gradient is the weight row.
  auto net = make("linear", {3, 1, 1}, 2, 0);
  auto& W = net.parameters()[0].value;
  W[3] = 0.1;
  W[4] = -0.5;
  W[5] = 0.2;
  const auto s = saliency_map(net, Tensor<double>({3, 1, 1}, 0.3), 1);
  ASSERT_EQ(s.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
}

TEST(Saliency, SingleChannelIsAbsoluteGradient) {
  const auto net = make("cnn-small", {1, 8, 8}, 4, 11);
  const auto x = random_tensor({2, 1, 8, 8}, 12);
  const std::vector<std::size_t> t{3, 1};
  const auto g = logit_input_gradient(net, x, std::span<const std::size_t>(t));
  const auto s = saliency_maps(net, x, std::span<const std::size_t>(t));
  ASSERT_EQ(s.shape(), (Shape{2, 8, 8}));
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(s[i], std::abs(g[i]));
}

TEST(Saliency, MatchesFiniteDifferencesPerClass) {
  const auto net = make("cnn-small", {2, 4, 4}, 3, 13);
  const auto x = random_tensor({2, 4, 4}, 14);
  for (std::size_t t = 0; t < 3; ++t) {
    const auto s = saliency_map(net, x, t);
    const std::function<double(const Tensor<double>&)> f = [&](const Tensor<double>& xi) {
      Tape<double> tape;
      return net.forward(tape, tape.constant(xi.reshaped({1, 2, 4, 4}))).value()[t];
    };
    const auto fd = finite_difference_gradient(f, x, 1e-5);
    for (std::size_t p = 0; p < 16; ++p) {
      const double want = std::max(std::abs(fd[p]), std::abs(fd[16 + p]));
      EXPECT_NEAR(s[p], want, 1e-7 * std::max(1.0, want));
    }
  }
}

TEST(Saliency, PercentileClipOnlyCapsTheTail) {
  Tensor<double> v({10}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 100});
  const auto c = clip_percentile(v, 0.9);
  EXPECT_EQ(c[9], 9);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(c[i], v[i]);
}

TEST(LogPearson, ProportionalAndInverse) {
  std::vector<double> edge(30), prop(30), inv(30);
  Rng r(3);
  for (std::size_t i = 0; i < edge.size(); ++i) {
    edge[i] = std::exp(r.uniform(-3, 3));
    prop[i] = 2.5 * edge[i];
    inv[i] = 0.7 / edge[i];
  }
  EXPECT_NEAR(*log_pearson(prop, edge, 1e-3), 1.0, 1e-12);
  EXPECT_NEAR(*log_pearson(inv, edge, 1e-3), -1.0, 1e-12);
}

TEST(LogPearson, PositiveRescalingInvariance) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng r(seed);
    std::vector<double> a(40), b(40);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = std::exp(r.uniform(-6, 0));
      b[i] = std::exp(r.uniform(-2, 4));
    }
    const double base = *log_pearson(a, b, 1e-3);
    EXPECT_GE(base, -1);
    EXPECT_LE(base, 1);
    auto as = a, bs = b;
    for (auto& v : as) v *= 37.0;
    for (auto& v : bs) v *= 4.0;  // image intensity x2 scales energy by 4
    EXPECT_NEAR(*log_pearson(as, b, 1e-3), base, 1e-10);
    EXPECT_NEAR(*log_pearson(a, bs, 1e-3), base, 1e-10);
  }
}

TEST(LogPearson, ConstantSeriesIsDegenerate) {
  const std::vector<double> c(9, 0.25), v{1, 2, 3, 4, 5, 6, 7, 8, 9};
  EXPECT_FALSE(log_pearson(c, v, 1e-3).has_value());
  EXPECT_FALSE(log_pearson(v, std::vector<double>(9, 1e-6), 1e-3).has_value());  // all clamped
  EXPECT_THROW(log_pearson(v, v, 0.0), Error);
}

TEST(EdgeCorrelation, FlatImagesAreSkippedAndCounted) {
  const auto net = make("cnn-small", {1, 8, 8}, 10, 15);
  auto data = shapes(12, 8, 16);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t p = 0; p < 64; ++p) data.images[n * 64 + p] = 0.5;
  EvalOptions opt;
  opt.batch_size = 5;
  const auto ec = edge_correlation(net, data, {}, opt);
  EXPECT_EQ(ec.saliency.skipped, 3u);
  EXPECT_EQ(ec.saliency.values.size(), 9u);
  EXPECT_EQ(ec.lossgrad.values.size() + ec.lossgrad.skipped, 12u);
  EXPECT_EQ(ec.saliency.index.front(), 3u);
  for (double v : ec.saliency.values) {
    EXPECT_GE(v, -1);
    EXPECT_LE(v, 1);
  }
  EdgeCorrelationConfig bad;
  bad.clamp_floor = 0;
  EXPECT_THROW(edge_correlation(net, data, bad), Error);
}

TEST(Curvature, DiagonalQuadratic) {
  Tensor<double> x({2, 2}, std::vector<double>{1, 1, 2, -1});
  const auto e = power_iteration_curvature(quadratic({3, 1}), x, {});
  ASSERT_EQ(e.size(), 2u);
  EXPECT_NEAR(e[0].grad_l2, std::sqrt(10.0), 1e-12);
  EXPECT_NEAR(e[0].hess_spec, 3.0, 1e-6);
  EXPECT_EQ(e[0].hess_sign, 1);
  ASSERT_TRUE(e[0].curvature);
  EXPECT_NEAR(*e[0].curvature, 0.94868, 1e-5);
  EXPECT_NEAR(*e[0].curvature, 3.0 / std::sqrt(10.0), 1e-6);
  EXPECT_NEAR(*e[1].curvature, 3.0 / std::sqrt(37.0), 1e-6);
  EXPECT_TRUE(e[0].converged);
}

TEST(Curvature, SignIsReportedSeparately) {
  Tensor<double> x({1, 2}, std::vector<double>{1, 1});
  const auto e = power_iteration_curvature(quadratic({-4, 1}), x, {});
  EXPECT_NEAR(e[0].hess_spec, 4.0, 1e-6);
  EXPECT_EQ(e[0].hess_sign, -1);
  EXPECT_GE(*e[0].curvature, 0);
}

TEST(Curvature, ZeroGradientIsAbsent) {
  Tensor<double> x({1, 2}, 0.0);
  PowerIterationConfig cfg;
  cfg.iterations = 60;
  const auto e = power_iteration_curvature(quadratic({3, 1}), x, cfg);
  EXPECT_FALSE(e[0].curvature.has_value());
  EXPECT_NEAR(e[0].hess_spec, 3.0, 1e-6);  // falls back to a random start
  EXPECT_EQ(summarize_geometry(e).absent, 1u);
}

TEST(Curvature, LinearRegressionRankOne) {
  const std::vector<double> w{0.5, -1.5, 2.0};
  const double y = 0.3;
  auto loss = [&](Tape<double>& tape, const Var<double>& x) {
    const auto r = shift(sum(mul(x, tape.constant(Tensor<double>({1, 3}, w)))), -y);
    return scale(mul(r, r), 0.5);
  };
  Tensor<double> x({1, 3}, std::vector<double>{1, 2, 3});
  const auto e = power_iteration_curvature(loss, x, {});
  const double ww = 0.25 + 2.25 + 4.0;
  const double resid = 0.5 - 3.0 + 6.0 - y;
  EXPECT_NEAR(e[0].hess_spec, ww, 1e-9);
  EXPECT_NEAR(e[0].grad_l2, std::abs(resid) * std::sqrt(ww), 1e-12);
}

TEST(Curvature, MatchesDenseEigenOracle) {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    const auto net = tiny_mlp(seed);
    const auto x = random_tensor({1, 1, 4, 4}, seed + 100);
    const std::vector<std::size_t> y{seed % 3};
    PowerIterationConfig cfg;
    cfg.iterations = 2000;
    cfg.tolerance = 1e-14;
    const auto e = normalized_curvature(net, x, std::span<const std::size_t>(y), cfg);
    // Dense Hessian from central differences of the tape gradient.
    const std::size_t d = 16;
    Eigen::MatrixXd H(d, d);
    auto grad_at = [&](const Tensor<double>& xi) {
      return loss_input_gradient(net, xi, std::span<const std::size_t>(y)).gradient;
    };
    const double h = 1e-5;
    for (std::size_t j = 0; j < d; ++j) {
      Tensor<double> xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      const auto gp = grad_at(xp), gm = grad_at(xm);
      for (std::size_t i = 0; i < d; ++i) H(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (gp[i] - gm[i]) / (2 * h);
    }
    const Eigen::MatrixXd Hs = 0.5 * (H + H.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Hs);
    const auto& ev = es.eigenvalues();
    const double top = std::abs(ev(0)) > std::abs(ev(d - 1)) ? ev(0) : ev(d - 1);
    EXPECT_NEAR(e[0].hess_spec, std::abs(top), 1e-6 * std::abs(top)) << "seed " << seed;
    EXPECT_EQ(e[0].hess_sign, top > 0 ? 1 : -1);
    const auto g = grad_at(x);
    EXPECT_NEAR(e[0].grad_l2, per_example_l2(g)[0], 1e-12);
    EXPECT_NEAR(*e[0].curvature, e[0].hess_spec / e[0].grad_l2, 1e-15 * *e[0].curvature);
  }
}

TEST(Curvature, LinearSoftmaxClosedForm) {
  // Hessian of CE(Wx + b, y) in x is W^T (diag(p) - p p^T) W.
  const auto net = make("linear", {1, 2, 3}, 4, 31);
  const auto x = random_tensor({1, 1, 2, 3}, 32);
  const std::vector<std::size_t> y{2};
  PowerIterationConfig cfg;
  cfg.iterations = 3000;
  cfg.tolerance = 1e-15;
  const auto e = normalized_curvature(net, x, std::span<const std::size_t>(y), cfg);
  const auto& W = net.parameters()[0].value;
  Eigen::MatrixXd Wm(4, 6);
  for (Eigen::Index k = 0; k < 4; ++k)
    for (Eigen::Index j = 0; j < 6; ++j) Wm(k, j) = W[static_cast<std::size_t>(k * 6 + j)];
  Tape<double> tape;
  const auto logits = net.forward(tape, tape.constant(x)).value();
  const auto p = softmax_row(logits, 0);
  Eigen::VectorXd pv = Eigen::Map<const Eigen::VectorXd>(p.data(), 4);
  const Eigen::MatrixXd Hm = Wm.transpose() * (Eigen::MatrixXd(pv.asDiagonal()) - pv * pv.transpose()) * Wm;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Hm);
  EXPECT_NEAR(e[0].hess_spec, es.eigenvalues().maxCoeff(), 1e-6 * es.eigenvalues().maxCoeff());
  EXPECT_EQ(e[0].hess_sign, 1);
}

TEST(Curvature, GeometryStatsDeterministicAndThreadIndependent) {
  const auto net = make("cnn-small", {1, 8, 8}, 10, 41);
  const auto data = shapes(10, 8, 42);
  const auto before = net.parameters();
  EvalOptions a, b;
  a.batch_size = b.batch_size = 3;
  b.threads = 3;
  PowerIterationConfig cfg;
  cfg.iterations = 5;
  const auto s1 = geometry_stats(net, data, cfg, a);
  const auto s2 = geometry_stats(net, data, cfg, b);
  ASSERT_EQ(s1.examples.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(s1.examples[i].hess_spec, s2.examples[i].hess_spec);
    EXPECT_EQ(s1.examples[i].grad_l2, s2.examples[i].grad_l2);
    if (s1.examples[i].curvature) {
      EXPECT_GE(*s1.examples[i].curvature, 0);
      EXPECT_NEAR(*s1.examples[i].curvature, s1.examples[i].hess_spec / s1.examples[i].grad_l2, 1e-15);
    }
  }
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto a = before[i].value.data(), b = net.parameters()[i].value.data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }
  EXPECT_THROW(geometry_stats(net, data, PowerIterationConfig{0}, a), Error);
}

TEST(Linearity, ScalarSquareHandCase) {
  auto square = [](const Tensor<double>& z) { return std::vector<double>{z[0] * z[0]}; };
  const double eps = 0.1;
  const Tensor<double> x({1, 1}, 0.7);
  const std::vector<double> alpha{0.5};
  const auto err = linearity_sample_error(square, x, std::span<const double>(alpha), Tensor<double>({1, 1}, eps),
                                          Tensor<double>({1, 1}, -eps));
  EXPECT_NEAR(err[0], std::pow(eps, 4), 1e-10);
}

TEST(Linearity, SquareGapIsAlphaOneMinusAlphaSpreadSquared) {
  auto square = [](const Tensor<double>& z) {
    std::vector<double> out(z.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = z[i] * z[i];
    return out;
  };
  Rng r(5);
  for (int k = 0; k < 50; ++k) {
    const std::vector<double> a{r.uniform()};
    const double e1 = r.uniform(-0.3, 0.3), e2 = r.uniform(-0.3, 0.3);
    const auto err = linearity_sample_error(square, Tensor<double>({1, 1}, r.uniform(-1, 1)), std::span<const double>(a),
                                            Tensor<double>({1, 1}, e1), Tensor<double>({1, 1}, e2));
    const double gap = a[0] * (1 - a[0]) * (e1 - e2) * (e1 - e2);
    EXPECT_NEAR(err[0], gap * gap, 1e-15);
  }
}

TEST(Linearity, AffineLossIsExactlyLinear) {
  const auto w = random_tensor({12}, 6, -2, 2);
  auto affine = [&](const Tensor<double>& xb) {
    std::vector<double> out(xb.dim(0), 0.75);
    for (std::size_t i = 0; i < out.size(); ++i)
      for (std::size_t j = 0; j < 12; ++j) out[i] += w[j] * xb[i * 12 + j];
    return out;
  };
  const auto x = random_tensor({4, 3, 2, 2}, 7);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const auto err = local_linearity_error(affine, x, LinearityProbe{6, 0.3}, rng);
    for (double v : err) EXPECT_NEAR(v, 0.0, 1e-12);
  }
}

TEST(Linearity, ModelErrorNonNegativeAndDeterministic) {
  const auto net = make("cnn-small", {1, 8, 8}, 10, 51);
  const auto data = shapes(9, 8, 52);
  EvalOptions opt;
  opt.batch_size = 4;
  opt.seed = 3;
  const LinearityProbe probe{3, 8.0 / 255.0};
  const auto a = linearity_stats(net, data, probe, opt);
  opt.threads = 2;
  const auto b = linearity_stats(net, data, probe, opt);
  EXPECT_EQ(a.examples, b.examples);
  for (double v : a.examples) EXPECT_GE(v, 0);
  EXPECT_THROW(linearity_stats(net, data, LinearityProbe{0, 0.1}, opt), Error);
}

TEST(DirectionSweep, EndpointsMatchCleanAndAttackedStatistics) {
  const auto net = make("cnn-small", {1, 8, 8}, 10, 61);
  const auto data = shapes(12, 8, 62);
  EvalOptions opt;
  opt.batch_size = 5;
  opt.seed = 9;
  const auto attack = AttackConfig::pgd(0.1, 5);
  PowerIterationConfig power;
  power.iterations = 3;
  const std::vector<double> grid{0.0, 0.05, 0.1, 0.2};
  const auto pts = attack_direction_sweep(net, data, attack, grid, power, opt);
  ASSERT_EQ(pts.size(), 4u);
  const auto ev = robust_accuracy(net, data, attack, opt);
  double clean_loss = 0, l1 = 0;
  for (const auto& e : ev.examples) {
    clean_loss += e.loss_clean;
    l1 += e.grad_l1;
  }
  EXPECT_NEAR(pts[0].mean_loss, clean_loss / 12, 1e-12);
  EXPECT_NEAR(pts[0].mean_grad_l1, l1 / 12, 1e-12);
  EXPECT_DOUBLE_EQ(pts[0].accuracy, ev.clean_accuracy);
  EXPECT_NEAR(pts[2].mean_loss, ev.mean_loss_adv, 1e-12);
  EXPECT_DOUBLE_EQ(pts[2].accuracy, ev.robust_accuracy);
  EXPECT_GE(pts[2].mean_loss, pts[0].mean_loss);
  EXPECT_THROW(attack_direction_sweep(net, data, AttackConfig::pgd(0.0, 5), grid, power, opt), Error);
}

TEST(Report, JsonAndCsvLayout) {
  const auto net = make("cnn-small", {1, 8, 8}, 10, 71);
  const auto data = shapes(8, 8, 72);
  DiagnosticsConfig cfg;
  cfg.attack = AttackConfig::pgd(0.0, 0);
  cfg.power.iterations = 3;
  cfg.probe = {2, 0.02};
  cfg.direction_grid = {0.0, 4.0 / 255.0};
  EvalOptions opt;
  opt.batch_size = 3;
  const auto r = run_diagnostics(net, data, cfg, opt);
  const auto j = to_json(r);
  for (const char* k : {"clean_accuracy", "gradient_norms", "correctness_histograms", "channel_histograms",
                        "edge_correlation", "geometry", "linearity", "attack_direction"})
    EXPECT_TRUE(j.contains(k)) << k;
  const auto& hist = j["gradient_norms"]["histogram"];
  EXPECT_EQ(hist["bin_edges"].size(), hist["counts"].size() + 1);
  // An untrained 10-way model misclassifies some examples and classifies others correctly
  // at epsilon 0; whichever conditional is empty serializes as null.
  if (!r.gradients.mean_l1_given_failure) {
    EXPECT_TRUE(j["gradient_norms"]["mean_l1_given_failure"].is_null());
  }
  const auto csv = diagnostics_csv(r);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);
  opt.threads = 2;
  EXPECT_EQ(to_json(run_diagnostics(net, data, cfg, opt)).dump(), j.dump());
}

}  // namespace
}  // namespace robustgrad
