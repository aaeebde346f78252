#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dpu/config.hpp"
#include "dpu/error.hpp"
#include "dpu/pipeline.hpp"

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string out_dir;
  std::string format;
  uint64_t seed = 0;
  bool seed_set = false;
};

dpu::ExperimentConfig build_config(const GlobalArgs& args) {
  dpu::ConfigMap cfg = args.config_path.empty() ? dpu::ConfigMap()
                                                : dpu::ConfigMap::parse_file(args.config_path);
  if (args.seed_set) cfg.set("seed", std::to_string(args.seed));
  if (!args.out_dir.empty()) cfg.set("out", args.out_dir);
  if (!args.format.empty()) cfg.set("format", args.format);
  return dpu::experiment_from_config(cfg);
}

void add_global_flags(CLI::App* cmd, GlobalArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config file");
  cmd->add_option("--seed", args.seed, "master seed override")
      ->each([&args](const std::string&) { args.seed_set = true; });
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--format", args.format, "report format: json or csv")
      ->check(CLI::IsMember({"json", "csv"}));
}

void print_summary(const dpu::MetricsReport& report) {
  for (const auto& [key, value] : report.scalars) std::printf("%s: %.6g\n", key.c_str(), value);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dropout prediction uncertainty estimation from neuron activation strengths"};
  app.require_subcommand(1);

  GlobalArgs args;
  std::string checkpoint = "checkpoints/target.dpum";
  std::string estimator_ckpt = "checkpoints/estimator.dpum";
  std::string features_csv = "features.csv";
  std::string pu_csv = "pu_labels.csv";

  auto* train_target = app.add_subcommand("train-target", "train the target model");
  add_global_flags(train_target, args);

  auto* gen_pu = app.add_subcommand("gen-pu", "generate dropout PU labels");
  add_global_flags(gen_pu, args);
  gen_pu->add_option("--checkpoint", checkpoint, "target checkpoint path");

  auto* extract = app.add_subcommand("extract-features", "extract activation features");
  add_global_flags(extract, args);
  extract->add_option("--checkpoint", checkpoint, "target checkpoint path");

  auto* train_est = app.add_subcommand("train-estimator", "train the PU estimator");
  add_global_flags(train_est, args);
  train_est->add_option("--features", features_csv, "features CSV path");
  train_est->add_option("--pu", pu_csv, "PU labels CSV path");

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a trained estimator");
  add_global_flags(evaluate, args);
  evaluate->add_option("--estimator", estimator_ckpt, "estimator checkpoint path");
  evaluate->add_option("--features", features_csv, "features CSV path");
  evaluate->add_option("--pu", pu_csv, "PU labels CSV path");

  auto* run = app.add_subcommand("run", "end-to-end experiment (config1 or config2)");
  add_global_flags(run, args);

  auto* sensitivity = app.add_subcommand("sensitivity", "DPU rate/retrain correlation study");
  add_global_flags(sensitivity, args);

  auto* ablate = app.add_subcommand("ablate-layers", "feature layer-subset ablation");
  add_global_flags(ablate, args);

  auto* ensemble = app.add_subcommand("ensemble-baseline", "independently trained ensemble PU");
  add_global_flags(ensemble, args);

  CLI11_PARSE(app, argc, argv);

  try {
    const dpu::ExperimentConfig cfg = build_config(args);
    if (train_target->parsed()) {
      dpu::stage_train_target(cfg);
    } else if (gen_pu->parsed()) {
      dpu::stage_gen_pu(cfg, checkpoint);
    } else if (extract->parsed()) {
      dpu::stage_extract_features(cfg, checkpoint);
    } else if (train_est->parsed()) {
      dpu::stage_train_estimator(cfg, features_csv, pu_csv);
    } else if (evaluate->parsed()) {
      print_summary(dpu::stage_evaluate(cfg, estimator_ckpt, features_csv, pu_csv));
    } else if (run->parsed()) {
      print_summary(dpu::run_experiment(cfg));
    } else if (sensitivity->parsed()) {
      print_summary(dpu::run_sensitivity(cfg));
    } else if (ablate->parsed()) {
      print_summary(dpu::run_layer_ablation(cfg));
    } else if (ensemble->parsed()) {
      print_summary(dpu::run_ensemble_baseline(cfg));
    }
  } catch (const dpu::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
