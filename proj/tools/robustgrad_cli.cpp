#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "robustgrad/experiment/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::size_t threads = 1;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool with_checkpoint) {
  cmd->add_option("--config", c.config, "YAML experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--preset", c.preset, "built-in config applied before --config");
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--out", c.out, "output directory (default: output.dir)");
  cmd->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
  if (with_checkpoint) cmd->add_option("--checkpoint", c.checkpoint, "model to evaluate (default: <out>/model.ckpt)");
  cmd->add_option("overrides", c.overrides, "section.key=value settings applied last");
}

robustgrad::ExperimentConfig load(const Common& c) {
  std::vector<robustgrad::ConfigOverride> ov;
  for (const auto& s : c.overrides) ov.push_back(robustgrad::parse_override(s));
  const std::string text = c.config.empty() ? std::string() : robustgrad::read_file(c.config);
  return robustgrad::load_experiment_config(text, c.preset, ov, c.seed);
}

robustgrad::RunOptions run_options(const Common& c) { return {c.out, c.checkpoint, c.threads}; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-norm regularized training, attacks and robustness diagnostics"};
  app.require_subcommand(1);
  std::string presets;
  for (const auto& p : robustgrad::preset_names()) presets += (presets.empty() ? "" : ", ") + p;
  app.footer("Presets: " + presets + "\nDataset files are read from data.dir or $ROBUSTGRAD_DATA_DIR.");

  Common train_o, attack_o, diag_o, sweep_o;
  auto* train = app.add_subcommand("train", "train a model and evaluate it");
  add_common(train, train_o, false);
  auto* attack = app.add_subcommand("attack", "robust accuracy and attack sweeps for a checkpoint");
  add_common(attack, attack_o, true);
  auto* diagnose = app.add_subcommand("diagnose", "gradient, edge, curvature and linearity diagnostics");
  add_common(diagnose, diag_o, true);
  auto* sweep = app.add_subcommand("sweep", "lambda, epsilon or interpolation curves");
  std::string sweep_kind;
  sweep->add_option("kind", sweep_kind, "lambda, epsilon or interpolation")
      ->required()
      ->check(CLI::IsMember({"lambda", "epsilon", "interpolation"}));
  add_common(sweep, sweep_o, true);
  auto* report = app.add_subcommand("report", "summarize run directories");
  std::string report_dir;
  report->add_option("dir", report_dir, "run directory or a directory of runs")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      std::cout << robustgrad::cmd_train(load(train_o), run_options(train_o)).dump(2) << '\n';
    } else if (attack->parsed()) {
      std::cout << robustgrad::cmd_attack(load(attack_o), run_options(attack_o)).dump(2) << '\n';
    } else if (diagnose->parsed()) {
      const auto j = robustgrad::cmd_diagnose(load(diag_o), run_options(diag_o));
      std::cout << "clean " << j["clean_accuracy"] << " robust " << j["robust_accuracy"] << " mean grad l1 "
                << j["gradient_norms"]["mean_l1"] << '\n';
    } else if (sweep->parsed()) {
      const auto kind = *robustgrad::parse_sweep_kind(sweep_kind);
      std::cout << robustgrad::cmd_sweep(kind, load(sweep_o), run_options(sweep_o)).dump(2) << '\n';
    } else if (report->parsed()) {
      std::cout << robustgrad::cmd_report(report_dir);
    }
  } catch (const robustgrad::ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
