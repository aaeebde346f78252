#pragma once

#include <string>
#include <vector>

#include "dpu/nn.hpp"
#include "dpu/types.hpp"

namespace dpu {

struct FeatureSpec {
  std::vector<int> layer_indices;  // post-ReLU FCL indices of the target net
  bool use_binary = true;
  bool use_values = true;
};

void validate(const FeatureSpec& fs, const NetworkSpec& net);

// Per-neuron z-score parameters, fit on the estimator training split only.
struct NormalizationStats {
  Vec mean;
  Vec sd;                        // Bessel-corrected
  std::vector<bool> degenerate;  // sd < 1e-8: z-score forced to 0
};

// Eval-mode post-ReLU activations of the selected layers, concatenated in
// layer order. Deterministic.
Mat capture_activations(const NetworkSpec& spec, const NetworkState& state, const Mat& x,
                        const std::vector<int>& layer_indices);

// entry = 1 iff raw entry > 0.
Mat binarize(const Mat& raw);

NormalizationStats fit_normalization(const Mat& raw_train);
Mat apply_normalization(const Mat& raw, const NormalizationStats& stats);

struct FeatureMatrix {
  Mat values;
  std::vector<std::string> manifest;  // layer<i>_n<j>_{bin|val} per column
};

// Concatenates the requested blocks: all binary blocks in layer order, then
// all value blocks. `stats` required iff use_values.
FeatureMatrix build_features(const Mat& raw, const FeatureSpec& fs, const NetworkSpec& net,
                             const NormalizationStats* stats);

void write_feature_csv(const std::string& path, const std::vector<int64_t>& example_ids,
                       const FeatureMatrix& features);
void write_feature_manifest(const std::string& path, const FeatureMatrix& features);

struct FeatureCsv {
  std::vector<int64_t> example_ids;
  Mat values;
  std::vector<std::string> manifest;
};

FeatureCsv read_feature_csv(const std::string& path);

void write_normalization_csv(const std::string& path, const NormalizationStats& stats);
NormalizationStats read_normalization_csv(const std::string& path);

}  // namespace dpu
