#pragma once

#include <string>
#include <vector>

#include "dpu/features.hpp"
#include "dpu/nn.hpp"
#include "dpu/types.hpp"
#include "dpu/uncertainty.hpp"

namespace dpu {

// Equal-frequency bucket edges: the i/k quantiles (linear interpolation
// between order statistics) of the training PU labels. Bucket 0 is the most
// certain class.
struct BucketBoundaries {
  int k = 5;
  std::vector<Real> boundaries;  // k-1 nondecreasing values
};

BucketBoundaries fit_buckets(const Vec& labels, int k);

// Count of boundaries below pu; a pu equal to a boundary goes to the higher
// bucket. Out-of-range values land in the end buckets.
int assign_bucket(Real pu, const BucketBoundaries& bounds);

enum class EstimatorMode { Regression, Classification };
enum class LabelTransform { Clip, LogScale };

struct EstimatorConfig {
  EstimatorMode mode = EstimatorMode::Regression;
  std::vector<int> hidden_widths = {100, 50};
  LabelTransform transform = LabelTransform::Clip;
  Real log_epsilon = 1e-8;
  int bucket_count = 5;
  TrainConfig train = default_train();

  // 50 epochs, lr 0.001 decayed by 0.1 at epochs 30 and 40.
  static TrainConfig default_train() {
    TrainConfig tc;
    tc.epochs = 50;
    tc.lr_decay_epochs = {30, 40};
    tc.lr_decay_factor = 0.1;
    return tc;
  }
};

struct EstimatorModel {
  NetworkSpec spec;
  NetworkState state;
  EstimatorMode mode = EstimatorMode::Regression;
  LabelTransform transform = LabelTransform::Clip;
  Real log_epsilon = 1e-8;
  Real label_min = 0;  // training-label clip range
  Real label_max = 0;
  BucketBoundaries buckets;  // classification only
  FeatureSpec feature_spec;
  NormalizationStats norm_stats;
};

// Trains the auxiliary MLP on (features, PU labels). Regression trains on
// transformed labels; classification on equal-frequency bucket indices.
// Preprocessing is frozen into the returned model.
EstimatorModel train_estimator(const FeatureMatrix& features, const Vec& labels,
                               const EstimatorConfig& config, const FeatureSpec& fspec,
                               const NormalizationStats& stats);

struct EstimateResult {
  Vec values;                      // regression: clipped PU estimates
  std::vector<int> bucket_index;   // classification
  Mat bucket_probabilities;        // classification, rows sum to 1
};

// Single eval-mode forward pass; regression output is inverse-transformed
// then clipped to the training-label range.
EstimateResult estimate(const EstimatorModel& model, const FeatureMatrix& features);

// Same value the estimator trains against internally (exposed for tests).
Real transform_label(Real pu, LabelTransform t, Real eps);
Real inverse_transform(Real z, LabelTransform t, Real eps);

void save_estimator(const std::string& path, const EstimatorModel& model);
EstimatorModel load_estimator(const std::string& path);

}  // namespace dpu
