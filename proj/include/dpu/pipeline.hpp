#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dpu/config.hpp"
#include "dpu/data.hpp"
#include "dpu/estimator.hpp"
#include "dpu/metrics.hpp"
#include "dpu/nn.hpp"
#include "dpu/uncertainty.hpp"

namespace dpu {

enum class Configuration { Config1, Config2 };
enum class LayerSubset { All, Bottom2, Bottom, Explicit };

struct ExperimentConfig {
  Configuration configuration = Configuration::Config1;

  // dataset
  std::string dataset_kind = "synthetic_hetero";  // synthetic_hetero | synthetic_blobs |
                                                  // synthetic_binary | idx | rating_csv
  Index dataset_n = 8000;
  NoiseProfile noise;
  double train_fraction = 0.5;
  double test_fraction = 0.5;
  std::string idx_images, idx_labels;  // dataset_kind == idx
  std::string csv_path, schema_path;   // dataset_kind == rating_csv
  int idx_classes = 10;

  // target network
  std::vector<int> target_hidden = {64, 32};
  std::vector<int> embedding_dims;  // one per categorical column; default 8
  bool target_batch_norm = true;
  double dropout_rate = 0.1;  // the rate under study
  TrainConfig target_train;   // defaults: 20 epochs, batch 128, lr 1e-3

  // features
  LayerSubset feature_layers = LayerSubset::All;
  std::vector<int> explicit_layer_indices;
  bool use_binary = true;
  bool use_values = true;

  // estimator
  EstimatorConfig estimator;
  bool run_both_estimators = false;  // report R^2 and bucket metrics together

  // experiment grids
  std::vector<double> rate_grid = {0.1, 0.2, 0.3, 0.4, 0.5};
  int n_inferences = 100;
  int retrain_count = 2;   // independently seeded pairs for sensitivity
  int seed_count = 5;      // repeats behind aggregate claims
  int ensemble_size = 10;
  std::vector<int> ensemble_seeds;  // explicit member seeds override the size

  uint64_t master_seed = 1;
  std::string out_dir;  // empty: keep everything in memory
  std::string report_format = "json";

  uint64_t config_hash = 0;  // canonical hash of the source ConfigMap
};

ExperimentConfig experiment_from_config(const ConfigMap& cfg);
void validate(const ExperimentConfig& cfg);

Dataset load_experiment_dataset(const ExperimentConfig& cfg);

// Target architecture for the configured dataset; with_dropout controls the
// dropout layers after each hidden block.
NetworkSpec build_target_spec(const ExperimentConfig& cfg, const Dataset& ds,
                              bool with_dropout);

std::vector<int> select_feature_layers(const ExperimentConfig& cfg, const NetworkSpec& net);

// Table 6 arithmetic: inputs x w1 + w1 x w2 + w2 x 1, bias ignored.
int64_t estimator_parameter_count(int64_t inputs, const std::vector<int>& hidden);

// End-to-end experiments. Artifacts (checkpoints, CSVs, report.json,
// histograms) are written under cfg.out_dir when it is set.
MetricsReport run_config1(const ExperimentConfig& cfg);
MetricsReport run_config2(const ExperimentConfig& cfg);
MetricsReport run_sensitivity(const ExperimentConfig& cfg);
MetricsReport run_layer_ablation(const ExperimentConfig& cfg);
MetricsReport run_ensemble_baseline(const ExperimentConfig& cfg);

// Dispatches on cfg.configuration.
MetricsReport run_experiment(const ExperimentConfig& cfg);

// Stage subcommands; each derives its inputs deterministically from the
// config (split seeds, stage seeds) and the named artifact files.
void stage_train_target(const ExperimentConfig& cfg);
void stage_gen_pu(const ExperimentConfig& cfg, const std::string& checkpoint_path);
void stage_extract_features(const ExperimentConfig& cfg, const std::string& checkpoint_path);
void stage_train_estimator(const ExperimentConfig& cfg, const std::string& features_csv,
                           const std::string& pu_csv);
MetricsReport stage_evaluate(const ExperimentConfig& cfg, const std::string& estimator_ckpt,
                             const std::string& features_csv, const std::string& pu_csv);

// report.json with the comparable payload separated from timestamps/host.
void write_report_json(const std::string& path, const MetricsReport& report);

// Stage seed labels, all derived from the master seed.
namespace stage_seed {
uint64_t split(uint64_t master);
uint64_t target(uint64_t master);
uint64_t side(uint64_t master);
uint64_t mc(uint64_t master);
uint64_t estimator(uint64_t master);
uint64_t ensemble_member(uint64_t master, int index);
uint64_t dataset(uint64_t master);
}  // namespace stage_seed

}  // namespace dpu
