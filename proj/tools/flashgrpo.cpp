// SPDX-License-Identifier: Apache-2.0
#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "flashgrpo.hpp"

namespace {

struct Args {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::uint64_t seed = 0;
  double lambda_fault = 1.0;
};

void add_common(CLI::App* cmd, Args& a) {
  cmd->add_option("--config", a.config, "run configuration (INI)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, "output directory");
  cmd->add_option("--checkpoint", a.checkpoint, "model checkpoint")->check(CLI::ExistingFile);
  cmd->add_option("--seed", a.seed, "seed override");
}

flashgrpo::CommandOptions to_options(const Args& a, const CLI::App* cmd) {
  flashgrpo::CommandOptions o;
  o.config_path = a.config;
  o.out_dir = a.out;
  if (!a.checkpoint.empty()) o.checkpoint = a.checkpoint;
  if (cmd->count("--seed") > 0) o.seed = a.seed;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-timestep GRPO alignment of flow-matching models"};
  app.require_subcommand(1);
  Args args;
  auto* pretrain = app.add_subcommand("pretrain", "flow-matching pretraining");
  auto* align = app.add_subcommand("align", "GRPO alignment from a checkpoint");
  auto* verify = app.add_subcommand("verify", "run the verification oracles");
  auto* compare = app.add_subcommand("compare", "run several methods from one checkpoint");
  for (auto* cmd : {pretrain, align, verify, compare}) add_common(cmd, args);
  verify->add_option("--lambda-fault", args.lambda_fault,
                     "multiply lambda in the gradient-identity check (fault injection)");
  CLI11_PARSE(app, argc, argv);

  try {
    if (*pretrain) return flashgrpo::cmd_pretrain(to_options(args, pretrain));
    if (*align) return flashgrpo::cmd_align(to_options(args, align));
    if (*compare) return flashgrpo::cmd_compare(to_options(args, compare));
    if (*verify) {
      flashgrpo::CommandOptions o = to_options(args, verify);
      if (verify->count("--lambda-fault") > 0) o.lambda_fault = args.lambda_fault;
      return flashgrpo::cmd_verify(o);
    }
  } catch (const flashgrpo::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
