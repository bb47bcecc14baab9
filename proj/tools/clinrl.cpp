#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "clinrl/experiment.hpp"

namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

fs::path default_out(const std::string& command, const clinrl::ExperimentConfig& cfg) {
  if (cfg.output_dir) return *cfg.output_dir;
  if (const char* root = std::getenv("CLINRL_OUT_ROOT"); root && *root) return fs::path(root) / command;
  return fs::path("runs") / command;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Offline RL toolkit for multimodal clinical decision data"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::string run_dir;

  auto add_common = [&](CLI::App* sub, bool needs_checkpoint) {
    sub->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Run a single seed instead of the configured list");
    sub->add_option("--out", out, "Output directory (default: config output_dir, then $CLINRL_OUT_ROOT/<command>)");
    if (needs_checkpoint) sub->add_option("--checkpoint", checkpoint, "Checkpoint to load instead of <out>/seed_N/");
  };

  add_common(app.add_subcommand("synth", "Generate a synthetic dataset and its ground truth"), false);
  add_common(app.add_subcommand("ingest", "Validate a dataset directory and write its canonical form"), false);
  add_common(app.add_subcommand("train", "Train a policy per seed"), false);
  add_common(app.add_subcommand("eval", "OPE, BDESR and Bellman residuals for trained policies"), true);
  add_common(app.add_subcommand("ope", "Off-policy evaluation only"), true);
  add_common(app.add_subcommand("bdesr", "Discrepancy cohorts and survival rates only"), true);
  add_common(app.add_subcommand("ablate", "Variant, note-strategy and window sweeps"), false);
  add_common(app.add_subcommand("cross-eval", "Train on one dataset, evaluate on another"), false);
  auto* report = app.add_subcommand("report", "Rebuild tables and plot data from a run directory");
  report->add_option("run_dir", run_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "report") {
      clinrl::cmd_report(run_dir);
      return kOk;
    }
    clinrl::CommandContext ctx;
    ctx.config = clinrl::load_experiment_config(config_path);
    if (seed) ctx.config.seeds = {*seed};
    ctx.out = out.empty() ? default_out(command, ctx.config) : fs::path(out);
    if (!checkpoint.empty()) ctx.checkpoint = checkpoint;
    ctx.log = &std::cerr;

    if (command == "synth") clinrl::cmd_synth(ctx);
    else if (command == "ingest") clinrl::cmd_ingest(ctx);
    else if (command == "train") clinrl::cmd_train(ctx);
    else if (command == "eval") clinrl::cmd_eval(ctx);
    else if (command == "ope") clinrl::cmd_ope(ctx);
    else if (command == "bdesr") clinrl::cmd_bdesr(ctx);
    else if (command == "ablate") clinrl::cmd_ablate(ctx);
    else if (command == "cross-eval") clinrl::cmd_cross_eval(ctx);
    std::cerr << "outputs in " << ctx.out.string() << "\n";
    return kOk;
  } catch (const clinrl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const clinrl::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const clinrl::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}
