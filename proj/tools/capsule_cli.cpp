#include <iostream>

#include <CLI11.hpp>

#include "capsule/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Capsule network training and evaluation toolkit"};
  app.require_subcommand(1);

  capsule::CommandOptions opts;
  std::string config, out, checkpoint, corrupt;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "Experiment config (JSON)");
    cmd->add_option("--out", out, "Output directory (overrides config.out_dir)");
    cmd->add_option("--seed", seed, "Master seed (overrides config.seed)");
  };

  auto* train = app.add_subcommand("train", "Train, evaluate on the test split, export artifacts");
  add_common(train);
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--split", opts.split, "train, val or test")->default_val("test");
  auto* preview = app.add_subcommand("preview-augment", "Write original/augmented image pairs");
  add_common(preview);
  preview->add_option("-n,--count", opts.preview_count, "Number of pairs")->default_val(8);
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the full loss gradient");
  add_common(grad);
  grad->add_option("--corrupt-op", corrupt, "Scale one op's backward rule (detector self-test)");
  grad->add_option("--corrupt-factor", opts.corrupt_factor, "Scale used with --corrupt-op");

  CLI11_PARSE(app, argc, argv);

  auto is_set = [](CLI::App* cmd, const char* name) { return cmd->count(name) > 0; };
  CLI::App* active = app.get_subcommands().front();
  if (is_set(active, "--config")) opts.config = config;
  if (is_set(active, "--out")) opts.out_dir = out;
  if (is_set(active, "--seed")) opts.seed = seed;
  if (active == eval) opts.checkpoint = checkpoint;
  if (active == grad && !corrupt.empty()) opts.corrupt_op = corrupt;

  if (active == train) return capsule::cmd_train(opts, std::cout, std::cerr);
  if (active == eval) return capsule::cmd_eval(opts, std::cout, std::cerr);
  if (active == preview) return capsule::cmd_preview_augment(opts, std::cout, std::cerr);
  return capsule::cmd_gradcheck(opts, std::cout, std::cerr);
}
