// advdpnp command-line driver: train / eval / sweep / gradcheck.
// Exit codes: 0 success, 2 config error, 3 numeric failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "advdpnp/runner.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string checkpoint_path;
  std::string out_dir;
  std::int64_t seed = -1;  // -1: keep the config's seed
};

advdpnp::ExperimentConfig load(const CommonArgs& args) {
  advdpnp::ExperimentConfig cfg = advdpnp::load_config(args.config_path);
  if (args.seed >= 0) {
    cfg.seed = static_cast<std::uint64_t>(args.seed);
    cfg.train.seed = cfg.seed;
    cfg.echo["seed"] = cfg.seed;
  }
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (cfg.out_dir.empty()) {
    throw advdpnp::ConfigError("no output directory (config out_dir or --out-dir)");
  }
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_checkpoint) {
  cmd->add_option("--config", args.config_path, "experiment config JSON")
      ->required();
  cmd->add_option("--out-dir", args.out_dir, "output directory (overrides config)");
  cmd->add_option("--seed", args.seed, "seed override");
  if (needs_checkpoint) {
    cmd->add_option("--checkpoint", args.checkpoint_path, "model checkpoint")
        ->required();
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adv-DPNP desk-scale trainer and evaluation harness"};
  app.require_subcommand(1);

  CommonArgs train_args, eval_args, sweep_args;
  std::int64_t gradcheck_seed = 1;
  int gradcheck_runs = 20;
  double gradcheck_tolerance = 1e-4;

  CLI::App* cmd_train = app.add_subcommand("train", "train a model");
  add_common(cmd_train, train_args, false);
  CLI::App* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(cmd_eval, eval_args, true);
  CLI::App* cmd_sweep =
      app.add_subcommand("sweep", "attack-strength sweeps on a checkpoint");
  add_common(cmd_sweep, sweep_args, true);
  CLI::App* cmd_gradcheck =
      app.add_subcommand("gradcheck", "verify loss gradients against central differences");
  cmd_gradcheck->add_option("--seed", gradcheck_seed, "base seed");
  cmd_gradcheck->add_option("--runs", gradcheck_runs, "number of random seeds");
  cmd_gradcheck->add_option("--tolerance", gradcheck_tolerance,
                            "max relative error");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_train->parsed()) {
      advdpnp::ExperimentConfig cfg = load(train_args);
      advdpnp::run_train(cfg, cfg.out_dir);
      std::cout << "wrote " << cfg.out_dir << "/checkpoint.bin\n";
    } else if (cmd_eval->parsed()) {
      advdpnp::ExperimentConfig cfg = load(eval_args);
      advdpnp::run_eval(cfg, eval_args.checkpoint_path, cfg.out_dir);
      std::cout << "wrote " << cfg.out_dir << "/metrics.json\n";
    } else if (cmd_sweep->parsed()) {
      advdpnp::ExperimentConfig cfg = load(sweep_args);
      advdpnp::run_sweep(cfg, sweep_args.checkpoint_path, cfg.out_dir);
      std::cout << "wrote " << cfg.out_dir << "/sweep.csv\n";
    } else if (cmd_gradcheck->parsed()) {
      return advdpnp::run_gradcheck(static_cast<std::uint64_t>(gradcheck_seed),
                                    gradcheck_runs, gradcheck_tolerance,
                                    std::cout);
    }
  } catch (const advdpnp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const advdpnp::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
