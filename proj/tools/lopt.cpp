#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lopt/commands.hpp"

namespace {

void add_config_source(CLI::App* cmd, lopt::cli::ConfigSource& src) {
  cmd->add_option("-c,--config", src.config_path, "key = value config file");
  cmd->add_option("-p,--preset", src.preset, "named preset")
      ->check(CLI::IsMember(lopt::preset_names()));
  cmd->add_option("-s,--set", src.overrides, "override, key=value (repeatable)");
  cmd->add_option("-o,--out", src.out_dir, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  using namespace lopt::cli;
  CLI::App app{"lopt: learned reparameterization for optimization-based inference"};
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 0;
  app.add_option("-t,--threads", threads, "worker threads (default: hardware concurrency)")
      ->check(CLI::NonNegativeNumber);

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "train the mapping network (coordinate descent)");
  add_config_source(train_cmd, train.source);
  train_cmd->add_flag("--online", train.online, "online variant: one theta step after every z step");

  InferOptions infer;
  auto* infer_cmd = app.add_subcommand("infer", "run inference on an observations file");
  infer_cmd->add_option("--checkpoint", infer.checkpoint)->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--observations", infer.observations)->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("-o,--out", infer.out_dir);
  auto* base_flag = infer_cmd->add_flag("--baseline", infer.baseline, "descend directly on x");
  infer_cmd->add_flag("--mapped", "descend on z through theta (default)")->excludes(base_flag);
  infer_cmd->add_option("--hypotheses", infer.hypotheses)->check(CLI::PositiveNumber);
  infer_cmd->add_option("--mask", infer.mask, "bitstring or index list of observed entries");
  infer_cmd->add_option("--steps", infer.steps)->check(CLI::PositiveNumber);
  infer_cmd->add_option("--init", infer.init)->check(CLI::IsMember({"zero", "gaussian"}));

  LandscapeOptions land;
  auto* land_cmd = app.add_subcommand("landscape", "X-space and Z-space loss grids per observation");
  land_cmd->add_option("--checkpoint", land.checkpoint)->required()->check(CLI::ExistingFile);
  land_cmd->add_option("--observations", land.observations)->required()->check(CLI::ExistingFile);
  land_cmd->add_option("-o,--out", land.out_dir);
  land_cmd->add_option("--count", land.count, "grids for the first N observations");
  land_cmd->add_option("--resolution", land.resolution)->check(CLI::Range(3, 1001));
  land_cmd->add_option("--width", land.width_factor, "half width in latent standard deviations");

  AblateOptions abl;
  auto* abl_cmd = app.add_subcommand("ablate", "full / no_cd_no_buffer / random_theta / baseline");
  add_config_source(abl_cmd, abl.source);
  abl_cmd->add_option("--steps", abl.steps, "step counts to report")->delimiter(',');

  CheckOptions check;
  auto* check_cmd = app.add_subcommand("check", "finite-difference and grid-oracle gates");
  check_cmd->add_flag("--grad", check.grad);
  check_cmd->add_flag("--oracle", check.oracle);
  check_cmd->add_option("--perturb", check.perturb, "scale one op's adjoint, op[:factor]");
  check_cmd->add_option("--seeds", check.seeds)->check(CLI::PositiveNumber);
  check_cmd->add_option("--fixtures", check.fixtures, "oracle fixture file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  return guarded(std::cerr, [&] {
    if (*train_cmd) {
      train.threads = threads;
      return cmd_train(train, std::cout);
    }
    if (*infer_cmd) {
      infer.threads = threads;
      return cmd_infer(infer, std::cout);
    }
    if (*land_cmd) {
      land.threads = threads;
      return cmd_landscape(land, std::cout);
    }
    if (*abl_cmd) {
      abl.threads = threads;
      return cmd_ablate(abl, std::cout);
    }
    check.threads = threads;
    return cmd_check(check, std::cout);
  });
}
