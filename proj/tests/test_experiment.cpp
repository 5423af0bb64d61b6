#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "robustgrad/experiment/commands.hpp"

using namespace robustgrad;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"(data:
  source: synthetic
  kind: edge-shapes
  image_size: 8
  samples: 120
  val_samples: 40
  seed: 3
model:
  arch: cnn-small
objective:
  kind: gradnorm
  attack_eps: 0.1
schedule:
  epochs: 2
  batch_size: 32
  lrb: 0.002
  eval_eps: 0.1
  eval_it: 2
  eval_examples: 20
attack:
  method: pgd
  eps: 0.1
  step: 0.025
  iterations: 3
  examples: 40
diagnostics:
  examples: 10
  batch_size: 5
  power_iters: 5
  linearity_samples: 2
  attack_eps: 0.1
  attack_it: 2
  direction_eps: 0.1
  direction_it: 2
)";

ExperimentConfig small(std::vector<std::string> overrides = {}) {
  std::vector<ConfigOverride> ov;
  for (const auto& s : overrides) ov.push_back(parse_override(s));
  return load_experiment_config(kSmall, "", ov);
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("robustgrad_test_experiment_" + name);
  fs::remove_all(p);
  return p;
}

std::map<std::string, std::string> files_in(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (!name.ends_with(".timing.json")) out[name] = read_file(e.path().string());
  }
  return out;
}

ConfigError config_error(const std::string& doc, std::vector<std::string> overrides = {}) {
  std::vector<ConfigOverride> ov;
  for (const auto& s : overrides) ov.push_back(parse_override(s));
  try {
    load_experiment_config(doc, "", ov);
  } catch (const ConfigError& e) {
    return e;
  }
  ADD_FAILURE() << "no ConfigError for:\n" << doc;
  return ConfigError("", 0, "");
}

}  // namespace

TEST(Config, PresetsLoad) {
  for (const auto& name : preset_names()) EXPECT_NO_THROW(load_experiment_config("", name)) << name;
  const auto c = load_experiment_config("", "mnist-fast");
  EXPECT_EQ(c.preset, "mnist-fast");
  EXPECT_EQ(c.training.epochs, 10u);
  EXPECT_EQ(c.training.objective.kind, ObjectiveKind::gradnorm);
  EXPECT_EQ(c.model.arch, "cnn-small");
  EXPECT_EQ(c.model.activation, ActivationKind::gelu);
  EXPECT_EQ(c.attack.attack.iterations, 40u);
  EXPECT_DOUBLE_EQ(c.attack.attack.epsilon, 0.1);
  EXPECT_DOUBLE_EQ(load_experiment_config("", "cifar-small").training.objective.gradnorm.sigma, 0.225);
}

TEST(Config, LayersApplyInOrder) {
  const std::string file = "schedule:\n  epochs: 3\n";
  EXPECT_EQ(load_experiment_config("", "mnist-fast").training.epochs, 10u);
  EXPECT_EQ(load_experiment_config(file, "mnist-fast").training.epochs, 3u);
  EXPECT_EQ(load_experiment_config(file, "mnist-fast", {parse_override("schedule.epochs=4")}).training.epochs, 4u);
  const auto c = load_experiment_config("preset: mnist-fast\n", "", {parse_override("objective=natural")}, 9);
  EXPECT_EQ(c.training.objective.kind, ObjectiveKind::natural);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.training.seed, 9u);
  EXPECT_EQ(c.training.batch_size, 64u);
}

TEST(Config, TrainingRecipeKeys) {
  const auto c = load_experiment_config(R"(objective:
  ce_weight: 0.5
  gradnorm_weight: 1.5
  attack_eps: 0.0156862745
  attack_it: 3
  attack_step: 0.004
  smoothing: 0.1
schedule:
  opt: adamw
  opt_eps: 1.0e-8
  opt_betas: null
  momentum: 0.9
  weight_decay: 0.05
  epochs: 20
  sched: cosine
  lrb: 0.001
  warmup_lr: 1.0e-6
  min_lr: 1.0e-5
  warmup_epochs: 2
  batch_size: 16
  model_ema: true
  model_ema_decay: 0.9998
)");
  const auto& t = c.training;
  EXPECT_DOUBLE_EQ(t.objective.gradnorm.lambda_ce, 0.5);
  EXPECT_DOUBLE_EQ(t.objective.gradnorm.lambda_gn, 1.5);
  EXPECT_DOUBLE_EQ(t.objective.gradnorm.epsilon, 0.0156862745);
  EXPECT_DOUBLE_EQ(t.objective.adv.attack.epsilon, 0.0156862745);
  EXPECT_EQ(t.objective.adv.attack.iterations, 3u);
  EXPECT_DOUBLE_EQ(t.objective.adv.attack.step_size, 0.004);
  EXPECT_DOUBLE_EQ(t.objective.gradnorm.label_smoothing, 0.1);
  EXPECT_DOUBLE_EQ(t.optimizer.weight_decay, 0.05);
  EXPECT_DOUBLE_EQ(t.optimizer.beta1, 0.9);
  EXPECT_EQ(t.epochs, 20u);
  EXPECT_DOUBLE_EQ(t.schedule.epochs, 20.0);
  EXPECT_DOUBLE_EQ(t.schedule.base_lr, 0.001);
  EXPECT_DOUBLE_EQ(t.schedule.warmup_lr, 1e-6);
  EXPECT_DOUBLE_EQ(t.schedule.min_lr, 1e-5);
  EXPECT_DOUBLE_EQ(t.schedule.warmup_epochs, 2.0);
  EXPECT_EQ(t.batch_size, 16u);
  EXPECT_DOUBLE_EQ(t.ema_decay, 0.9998);
}

TEST(Config, NoiseKinds) {
  const auto g = load_experiment_config("objective:\n  input_noise: gaussian\n  noise_std: 0.05\n");
  ASSERT_TRUE(std::holds_alternative<GaussianNoise>(g.training.objective.gradnorm.input_noise));
  EXPECT_DOUBLE_EQ(std::get<GaussianNoise>(g.training.objective.gradnorm.input_noise).std, 0.05);
  const auto a = load_experiment_config("objective:\n  input_noise: adversarial\n  attack_eps: 0.2\n  attack_it: 2\n  attack_step: 0.1\n");
  ASSERT_TRUE(std::holds_alternative<AdversarialNoise>(a.training.objective.gradnorm.input_noise));
  EXPECT_DOUBLE_EQ(std::get<AdversarialNoise>(a.training.objective.gradnorm.input_noise).attack.epsilon, 0.2);
  EXPECT_EQ(std::get<AdversarialNoise>(a.training.objective.gradnorm.input_noise).attack.iterations, 2u);
}

TEST(Config, UnknownKeyNamesKeyAndLine) {
  const auto e = config_error("schedule:\n  epochs: 2\n  ce_wieght: 0.5\n");
  EXPECT_EQ(e.key(), "schedule.ce_wieght");
  EXPECT_EQ(e.line(), 3);
  EXPECT_NE(std::string(e.what()).find("ce_wieght"), std::string::npos);
  EXPECT_EQ(config_error("trainer:\n  epochs: 2\n").key(), "trainer");
  const auto cli = config_error("", {"objective.ce_wieght=1"});
  EXPECT_EQ(cli.key(), "objective.ce_wieght");
  EXPECT_EQ(cli.line(), 0);
}

TEST(Config, OutOfScopeKeysPointToTheList) {
  for (const char* doc : {"schedule:\n  mixup: 0.8\n", "schedule:\n  aa: rand-m9\n", "data:\n  reprob: 0.25\n",
                          "mixup: 0.8\n", "schedule:\n  clip_grad: 1.0\n"}) {
    const auto e = config_error(doc);
    EXPECT_NE(std::string(e.what()).find("out-of-scope"), std::string::npos) << doc;
  }
}

TEST(Config, BadValuesRejected) {
  EXPECT_EQ(config_error("schedule:\n  epochs: -1\n").key(), "schedule.epochs");
  EXPECT_EQ(config_error("schedule:\n  opt: lamb\n").key(), "schedule.opt");
  EXPECT_EQ(config_error("objective:\n  kind: trades\n").key(), "objective.kind");
  EXPECT_EQ(config_error("model:\n  arch: resnet50\n").key(), "model.arch");
  EXPECT_EQ(config_error("schedule:\n  epochs: [1, 2]\n").line(), 2);
  EXPECT_EQ(config_error("preset: imagenet\n").key(), "preset");
  EXPECT_THROW(load_experiment_config("schedule: [\n"), ConfigError);
  EXPECT_THROW(load_experiment_config("schedule:\n  epochs: 2\nobjective:\n  warmup_reg_epochs: 3\n"), ConfigError);
  EXPECT_THROW(parse_override("epochs"), ConfigError);
}

TEST(Config, HashIgnoresLayoutButNotValues) {
  const auto a = load_experiment_config("schedule:\n  epochs: 2\n  lrb: 0.01\nmodel:\n  arch: linear\n");
  const auto b = load_experiment_config("model: {arch: linear}\nschedule: {lrb: 0.01, epochs: 2}\n");
  const auto c = load_experiment_config("schedule:\n  epochs: 3\n  lrb: 0.01\nmodel:\n  arch: linear\n");
  EXPECT_EQ(fnv1a_hex(a.canonical), fnv1a_hex(b.canonical));
  EXPECT_NE(fnv1a_hex(a.canonical), fnv1a_hex(c.canonical));
}

TEST(Config, ShippedConfigsLoad) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(fs::path(ROBUSTGRAD_SOURCE_DIR) / "configs")) {
    if (e.path().extension() != ".yaml") continue;
    SCOPED_TRACE(e.path().string());
    const auto cfg = load_experiment_config(read_file(e.path().string()));
    EXPECT_FALSE(cfg.preset.empty());
    EXPECT_FALSE(cfg.output.dir.empty());
    ++n;
  }
  EXPECT_GE(n, 3u);
}

TEST(Manifest, Fnv1aReferenceVectors) {
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
  EXPECT_EQ(fnv1a_hex("foobar"), "85944171f73967e8");
}

TEST(Commands, TrainWritesReproducibleOutputs) {
  const auto d1 = scratch("train1"), d2 = scratch("train2");
  const auto cfg = small();
  const auto s = cmd_train(cfg, {d1.string(), "", 1});
  cmd_train(cfg, {d2.string(), "", 2});
  EXPECT_EQ(s["passes_per_batch"], 5);
  const auto f1 = files_in(d1), f2 = files_in(d2);
  ASSERT_EQ(f1.size(), f2.size());
  for (const auto& [name, bytes] : f1) EXPECT_EQ(bytes, f2.at(name)) << name;
  for (const char* f : {"model.ckpt", "train_log.csv", "summary.json", "train.manifest.json"}) EXPECT_TRUE(f1.count(f)) << f;
  EXPECT_TRUE(fs::exists(d1 / "train.timing.json"));

  const auto log = f1.at("train_log.csv");
  EXPECT_EQ(log.rfind("# manifest=train.manifest.json config_hash=" + fnv1a_hex(cfg.canonical) + "\n", 0), 0u);
  const auto rows = parse_csv(log);
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) EXPECT_EQ(r.size(), rows[0].size());
  EXPECT_EQ(rows[0][0], "epoch");

  const auto man = nlohmann::json::parse(f1.at("train.manifest.json"));
  EXPECT_EQ(man["config_hash"], fnv1a_hex(cfg.canonical));
  EXPECT_EQ(man["passes"]["total"], man["passes"]["forward"].get<std::size_t>() + man["passes"]["backward"].get<std::size_t>());
  bool listed = false;
  for (const auto& o : man["outputs"])
    if (o["path"] == "model.ckpt") listed = o["fnv1a"] == fnv1a_hex(f1.at("model.ckpt"));
  EXPECT_TRUE(listed);
  EXPECT_FALSE(man.contains("wall_seconds"));

  const auto other = scratch("train3");
  cmd_train(small({"seed=5"}), {other.string(), "", 1});
  EXPECT_NE(files_in(other).at("model.ckpt"), f1.at("model.ckpt"));
}

TEST(Commands, AttackReportsAndSweeps) {
  const auto dir = scratch("attack");
  cmd_train(small(), {dir.string(), "", 1});
  const auto src = scratch("attack_source");
  cmd_train(small({"seed=1", "objective=natural"}), {src.string(), "", 1});

  const auto zero = cmd_attack(small({"attack.eps=0"}), {dir.string(), "", 1});
  EXPECT_EQ(zero["direct"]["robust_accuracy"], zero["direct"]["clean_accuracy"]);

  const auto r = cmd_attack(small({"attack.eps_grid=[0, 0.05, 0.1]", "attack.iteration_grid=[1, 3]",
                                   "attack.transfer_source=" + (src / "model.ckpt").string()}),
                            {dir.string(), "", 1});
  ASSERT_TRUE(r.contains("direct"));
  ASSERT_TRUE(r.contains("transfer"));
  EXPECT_EQ(r["transfer"]["clean_accuracy"], r["direct"]["clean_accuracy"]);
  const auto eps = parse_csv(read_file((dir / "epsilon_sweep.csv").string()));
  ASSERT_EQ(eps.size(), 4u);
  EXPECT_EQ(eps[0][0], "epsilon");
  EXPECT_EQ(eps[1][2], eps[1][1]);  // epsilon 0: robust equals clean
  EXPECT_EQ(parse_csv(read_file((dir / "iteration_sweep.csv").string())).size(), 3u);
  const auto examples = parse_csv(read_file((dir / "attack_examples.csv").string()));
  EXPECT_EQ(examples.size(), 41u);

  EXPECT_THROW(cmd_attack(small({"data.image_size=10"}), {dir.string(), "", 1}), CheckpointMismatch);
  EXPECT_THROW(cmd_attack(small(), {dir.string(), (dir / "missing.ckpt").string(), 1}), Error);
}

TEST(Commands, SweepCurves) {
  const auto dir = scratch("sweep");
  const auto one = cmd_sweep(SweepKind::lambda, small({"objective.lambda_grid=[0]", "schedule.epochs=1"}), {dir.string(), "", 1});
  EXPECT_EQ(one["points"], 1);
  const auto lam = parse_csv(read_file((dir / "lambda_sweep.csv").string()));
  ASSERT_EQ(lam.size(), 2u);
  EXPECT_EQ(lam[1][0], "0");
  EXPECT_THROW(cmd_sweep(SweepKind::lambda, small(), {dir.string(), "", 1}), ConfigError);

  cmd_train(small(), {dir.string(), "", 1});
  const auto cfg = small({"attack.eps_grid=[0, 0.1]", "diagnostics.direction_grid=[0, 0.05, 0.1]"});
  cmd_sweep(SweepKind::epsilon, cfg, {dir.string(), "", 1});
  const auto eps = parse_csv(read_file((dir / "epsilon_sweep.csv").string()));
  EXPECT_EQ(eps[1][1], eps[1][2]);

  cmd_sweep(SweepKind::interpolation, cfg, {dir.string(), "", 1});
  const auto interp = parse_csv(read_file((dir / "interpolation.csv").string()));
  ASSERT_EQ(interp.size(), 4u);
  // Endpoints: clean accuracy and the accuracy under the full attack.
  const auto data = load_experiment_data<double>(cfg.data);
  const auto net = load_checkpoint<double>((dir / "model.ckpt").string());
  EvalOptions opt;
  opt.seed = cfg.seed;
  opt.batch_size = cfg.diagnostics.batch_size;
  opt.limit = cfg.diagnostics.examples;
  const auto ev = robust_accuracy(net, data.test, cfg.diagnostics.cfg.direction_attack, opt);
  EXPECT_DOUBLE_EQ(std::stod(interp[1][4]), ev.clean_accuracy);
  EXPECT_DOUBLE_EQ(std::stod(interp[3][4]), ev.robust_accuracy);
}

TEST(Commands, DiagnoseGeometryMatchesDenseOracle) {
  const auto dir = scratch("geometry");
  const auto cfg = small({"diagnostics.which=[geometry]", "diagnostics.power_iters=3000", "diagnostics.power_tol=1e-15",
                          "diagnostics.examples=3"});
  const auto data = load_experiment_data<double>(cfg.data);
  const auto net = build_network(ModelSection{"linear", ActivationKind::gelu}, data.train, 4);
  fs::create_directories(dir);
  save_checkpoint(net, (dir / "model.ckpt").string());
  const auto j = cmd_diagnose(cfg, {dir.string(), "", 1});
  EXPECT_TRUE(j.contains("geometry"));
  EXPECT_FALSE(j.contains("edge_correlation"));
  EXPECT_FALSE(j.contains("linearity"));
  const auto rows = parse_csv(read_file((dir / "diagnostics.csv").string()));
  ASSERT_EQ(rows.size(), 4u);
  ASSERT_EQ(rows[0][6], "hess_spec");

  // Hessian of CE(Wx + b, y) in x is W^T (diag(p) - p p^T) W.
  const auto& W = net.parameters()[0].value;
  const Eigen::Index k = 10, d = 64;
  Eigen::MatrixXd Wm(k, d);
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = 0; b < d; ++b) Wm(a, b) = W[static_cast<std::size_t>(a * d + b)];
  for (std::size_t i = 0; i < 3; ++i) {
    const auto x = data.test.slice(i, 1);
    Tape<double> tape;
    const auto logits = net.forward(tape, tape.constant(x.images)).value();
    Eigen::VectorXd z(k);
    for (Eigen::Index a = 0; a < k; ++a) z(a) = logits[static_cast<std::size_t>(a)];
    Eigen::VectorXd pe = (z.array() - z.maxCoeff()).exp();
    pe /= pe.sum();
    const Eigen::MatrixXd H = Wm.transpose() * (Eigen::MatrixXd(pe.asDiagonal()) - pe * pe.transpose()) * Wm;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
    const double top = es.eigenvalues().maxCoeff();
    EXPECT_NEAR(std::stod(rows[i + 1][6]), top, 1e-6 * top) << "example " << i;
    Eigen::VectorXd onehot = Eigen::VectorXd::Zero(k);
    onehot(static_cast<Eigen::Index>(x.labels[0])) = 1;
    const double g2 = (Wm.transpose() * (pe - onehot)).norm();
    EXPECT_NEAR(std::stod(rows[i + 1][5]), g2, 1e-10 * g2);
    EXPECT_NEAR(std::stod(rows[i + 1][8]), top / g2, 1e-6 * top / g2);
  }
}

TEST(Commands, DiagnoseAllSectionsAndEmptyData) {
  const auto dir = scratch("diagnose");
  cmd_train(small(), {dir.string(), "", 1});
  const auto j = cmd_diagnose(small({"diagnostics.which=all", "diagnostics.direction_grid=[0, 0.1]",
                                     "diagnostics.saliency_examples=2"}),
                              {dir.string(), "", 1});
  for (const char* key : {"clean_accuracy", "gradient_norms", "correctness_histograms", "channel_histograms",
                          "edge_correlation", "geometry", "linearity", "attack_direction"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  const auto sal = parse_csv(read_file((dir / "saliency.csv").string()));
  EXPECT_EQ(sal.size(), 1u + 2 * 64);
  const auto diag = parse_csv(read_file((dir / "diagnostics.csv").string()));
  EXPECT_EQ(diag.size(), 11u);
  for (const auto& r : diag) EXPECT_EQ(r.size(), diag[0].size());
  EXPECT_TRUE(fs::exists(dir / "direction.csv"));
  EXPECT_THROW(cmd_diagnose(small({"data.val_samples=0"}), {dir.string(), "", 1}), EmptyDataset);

  const auto text = cmd_report(dir.string());
  EXPECT_NE(text.find("train config"), std::string::npos);
  EXPECT_NE(text.find("diagnose config"), std::string::npos);
  EXPECT_THROW(cmd_report((dir / "nope").string()), Error);
}
