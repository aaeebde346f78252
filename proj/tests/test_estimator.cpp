#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include "dpu/error.hpp"
#include "dpu/estimator.hpp"
#include "test_util.hpp"

using namespace dpu;

namespace {

Vec vec_of(std::initializer_list<Real> values) {
  Vec v(static_cast<Index>(values.size()));
  Index i = 0;
  for (Real x : values) v(i++) = x;
  return v;
}

// Linear-scan oracle: walk the buckets from the top and take the first whose
// lower boundary is at or below pu.
int assign_oracle(Real pu, const BucketBoundaries& bounds) {
  for (int b = bounds.k - 1; b >= 1; --b)
    if (pu >= bounds.boundaries[b - 1]) return b;
  return 0;
}

FeatureMatrix features_from(const Mat& values) {
  FeatureMatrix fm;
  fm.values = values;
  for (Index c = 0; c < values.cols(); ++c)
    fm.manifest.push_back("layer1_n" + std::to_string(c) + "_val");
  return fm;
}

NormalizationStats identity_stats(Index cols) {
  NormalizationStats stats;
  stats.mean = Vec::Zero(cols);
  stats.sd = Vec::Ones(cols);
  stats.degenerate.assign(cols, false);
  return stats;
}

FeatureSpec dummy_fspec() {
  FeatureSpec fs;
  fs.layer_indices = {1};
  return fs;
}

}  // namespace

TEST_CASE("labels 1..10 with k=5 give two per bucket") {
  Vec labels(10);
  for (int i = 0; i < 10; ++i) labels(i) = i + 1;
  const BucketBoundaries bounds = fit_buckets(labels, 5);
  REQUIRE(bounds.boundaries.size() == 4);
  std::map<int, int> counts;
  for (int i = 0; i < 10; ++i) counts[assign_bucket(labels(i), bounds)] += 1;
  for (int b = 0; b < 5; ++b) CHECK(counts[b] == 2);
}

TEST_CASE("distinct labels divisible by k split evenly") {
  RngEngine eng = make_engine(1);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 2 + static_cast<int>(eng() % 5);
    const int per = 3 + static_cast<int>(eng() % 8);
    Vec labels(k * per);
    for (Index i = 0; i < labels.size(); ++i) labels(i) = uniform01(eng);
    const BucketBoundaries bounds = fit_buckets(labels, k);
    std::map<int, int> counts;
    for (Index i = 0; i < labels.size(); ++i) counts[assign_bucket(labels(i), bounds)] += 1;
    for (int b = 0; b < k; ++b) CHECK(counts[b] == per);
  }
}

TEST_CASE("bucket defaults and degenerate labels") {
  EstimatorConfig config;
  CHECK(config.bucket_count == 5);
  CHECK_THROWS_AS(fit_buckets(vec_of({1, 1, 1, 2, 2}), 5), DegenerateError);
  CHECK_THROWS_AS(fit_buckets(vec_of({1, 2, 3, 4, 5}), 1), ValidationError);
}

TEST_CASE("bucket assignment: end clamps, boundary ties, monotonicity") {
  const BucketBoundaries bounds = fit_buckets(vec_of({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}), 5);
  CHECK(assign_bucket(-100.0, bounds) == 0);
  CHECK(assign_bucket(1e9, bounds) == 4);
  // a pu exactly on a boundary goes to the higher bucket
  for (size_t i = 0; i < bounds.boundaries.size(); ++i)
    CHECK(assign_bucket(bounds.boundaries[i], bounds) == static_cast<int>(i) + 1);

  RngEngine eng = make_engine(2);
  Real prev_pu = -10;
  int prev_bucket = 0;
  for (int t = 0; t < 1000; ++t) {
    const Real pu = uniform_in(eng, -2, 14);
    CHECK(assign_bucket(pu, bounds) == assign_oracle(pu, bounds));
    if (pu >= prev_pu) CHECK(assign_bucket(pu, bounds) >= prev_bucket);
    prev_pu = pu;
    prev_bucket = assign_bucket(pu, bounds);
  }
}

TEST_CASE("tie-heavy labels keep buckets within the tie allowance") {
  RngEngine eng = make_engine(3);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 40 + static_cast<int>(eng() % 60);
    const int k = 5;
    Vec labels(n);
    for (Index i = 0; i < n; ++i)
      labels(i) = std::floor(uniform01(eng) * 8) / 8;  // heavy ties
    std::vector<Real> sorted(labels.data(), labels.data() + n);
    std::sort(sorted.begin(), sorted.end());
    if (std::set<Real>(sorted.begin(), sorted.end()).size() < k) continue;

    const BucketBoundaries bounds = fit_buckets(labels, k);
    std::vector<int> counts(k, 0);
    for (Index i = 0; i < n; ++i) counts[assign_bucket(labels(i), bounds)] += 1;
    int ties = 0;
    for (Index i = 0; i < n; ++i)
      for (Real b : bounds.boundaries) ties += labels(i) == b;
    const int lo = n / k - ties;
    const int hi = (n + k - 1) / k + ties;
    for (int b = 0; b < k; ++b) {
      CHECK(counts[b] >= lo);
      CHECK(counts[b] <= hi);
    }
  }
}

TEST_CASE("label transforms invert exactly") {
  CHECK(transform_label(0.5, LabelTransform::Clip, 0) == doctest::Approx(0.5));
  for (Real pu : {0.0, 1e-6, 0.37, 12.0}) {
    const Real z = transform_label(pu, LabelTransform::LogScale, 1e-8);
    CHECK(inverse_transform(z, LabelTransform::LogScale, 1e-8) ==
          doctest::Approx(pu).epsilon(1e-6));
  }
}

TEST_CASE("constant labels are rejected") {
  const FeatureMatrix fm = features_from(Mat::Random(20, 3));
  EstimatorConfig config;
  config.mode = EstimatorMode::Regression;
  CHECK_THROWS_AS(
      train_estimator(fm, Vec::Constant(20, 0.7), config, dummy_fspec(), identity_stats(3)),
      DegenerateError);
}

TEST_CASE("near-constant labels are fit to high precision") {
  // constant-function fit: all labels c (plus one distinct point so training
  // is not degenerate); MSE collapses toward 0
  RngEngine eng = make_engine(4);
  const Index n = 64;
  const Mat x = testing::random_matrix(eng, n, 2);
  Vec labels = Vec::Constant(n, 0.5);
  labels(0) = 0.5000001;
  EstimatorConfig config;
  config.mode = EstimatorMode::Regression;
  config.hidden_widths = {8};
  config.train.epochs = 200;
  config.train.batch_size = 16;
  config.train.seed = 5;
  const FeatureMatrix fm = features_from(x);
  const EstimatorModel model =
      train_estimator(fm, labels, config, dummy_fspec(), identity_stats(2));
  const EstimateResult est = estimate(model, fm);
  const Real mse = (est.values - labels).array().square().mean();
  CHECK(mse < 1e-4);
}

TEST_CASE("planted linear signal is recovered with r2 >= 0.95") {
  RngEngine eng = make_engine(6);
  const Index n = 600;
  Mat x = testing::random_matrix(eng, n, 4);
  Vec labels(n);
  for (Index i = 0; i < n; ++i) labels(i) = 0.8 * x(i, 1) + 0.3;  // planted signal

  const FeatureMatrix fm_train = features_from(x.topRows(400));
  const FeatureMatrix fm_test = features_from(x.bottomRows(200));
  EstimatorConfig config;
  config.mode = EstimatorMode::Regression;
  config.train.seed = 11;
  const EstimatorModel model = train_estimator(fm_train, labels.head(400), config,
                                               dummy_fspec(), identity_stats(4));
  const EstimateResult est = estimate(model, fm_test);
  Real ss_res = 0, ss_tot = 0;
  const Real mean = labels.tail(200).mean();
  for (Index i = 0; i < 200; ++i) {
    ss_res += std::pow(labels(400 + i) - est.values(i), 2);
    ss_tot += std::pow(labels(400 + i) - mean, 2);
  }
  CHECK(1 - ss_res / ss_tot >= 0.95);
}

TEST_CASE("classification head width equals the bucket count") {
  RngEngine eng = make_engine(7);
  const Index n = 200;
  const Mat x = testing::random_matrix(eng, n, 3);
  Vec labels(n);
  for (Index i = 0; i < n; ++i) labels(i) = uniform01(eng);
  EstimatorConfig config;
  config.mode = EstimatorMode::Classification;
  config.bucket_count = 5;
  config.train.epochs = 3;
  config.train.seed = 8;
  const EstimatorModel model =
      train_estimator(features_from(x), labels, config, dummy_fspec(), identity_stats(3));
  CHECK(model.spec.output_width() == 5);
  CHECK(model.buckets.boundaries.size() == 4);

  const EstimateResult est = estimate(model, features_from(x));
  CHECK(est.bucket_probabilities.rows() == n);
  for (Index i = 0; i < n; ++i) {
    CHECK(std::abs(est.bucket_probabilities.row(i).sum() - 1.0) < 1e-6);
    Index arg;
    est.bucket_probabilities.row(i).maxCoeff(&arg);
    CHECK(est.bucket_index[i] == static_cast<int>(arg));
  }
}

TEST_CASE("regression estimates are clipped to the training-label range") {
  // identity network: output = the single feature
  EstimatorModel model;
  model.mode = EstimatorMode::Regression;
  model.transform = LabelTransform::Clip;
  model.label_min = 0.1;
  model.label_max = 0.35;
  model.spec.input_width = 1;
  model.spec.task = Task::regression();
  model.spec.layers = {LayerSpec::dense(1)};
  model.state = init_state(model.spec, 0);
  model.state.layers[0].w << 1.0;
  model.state.layers[0].b << 0.0;

  Mat probe(3, 1);
  probe << 2.0, -5.0, 0.2;  // above max, below min, inside
  const EstimateResult est = estimate(model, features_from(probe));
  CHECK(est.values(0) == doctest::Approx(0.35));
  CHECK(est.values(1) == doctest::Approx(0.1));
  CHECK(est.values(2) == doctest::Approx(0.2));
}

TEST_CASE("log-mode estimates invert the transform before clipping") {
  EstimatorModel model;
  model.mode = EstimatorMode::Regression;
  model.transform = LabelTransform::LogScale;
  model.log_epsilon = 1e-8;
  model.label_min = 0.0;
  model.label_max = 10.0;
  model.spec.input_width = 1;
  model.spec.task = Task::regression();
  model.spec.layers = {LayerSpec::dense(1)};
  model.state = init_state(model.spec, 0);
  model.state.layers[0].w << 1.0;
  model.state.layers[0].b << 0.0;

  Mat probe(2, 1);
  probe << std::log(0.5 + 1e-8), std::log(2.0 + 1e-8);  // network output z
  const EstimateResult est = estimate(model, features_from(probe));
  CHECK(est.values(0) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(est.values(1) == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("estimate rejects mismatched feature width") {
  RngEngine eng = make_engine(9);
  const Mat x = testing::random_matrix(eng, 50, 3);
  Vec labels(50);
  for (Index i = 0; i < 50; ++i) labels(i) = uniform01(eng);
  EstimatorConfig config;
  config.train.epochs = 1;
  const EstimatorModel model =
      train_estimator(features_from(x), labels, config, dummy_fspec(), identity_stats(3));
  CHECK_THROWS_AS(estimate(model, features_from(Mat::Random(5, 7))), ShapeError);
}

TEST_CASE("estimator checkpoint round-trips model and preprocessing") {
  RngEngine eng = make_engine(10);
  const Mat x = testing::random_matrix(eng, 80, 3);
  Vec labels(80);
  for (Index i = 0; i < 80; ++i) labels(i) = uniform01(eng);
  EstimatorConfig config;
  config.mode = EstimatorMode::Classification;
  config.train.epochs = 4;
  config.train.seed = 12;
  FeatureSpec fs;
  fs.layer_indices = {2, 5};
  fs.use_binary = false;
  const EstimatorModel model =
      train_estimator(features_from(x), labels, config, fs, identity_stats(3));

  const auto path = (std::filesystem::temp_directory_path() / "dpu_est.dpum").string();
  save_estimator(path, model);
  const EstimatorModel back = load_estimator(path);
  CHECK(back.mode == model.mode);
  CHECK(back.buckets.boundaries == model.buckets.boundaries);
  CHECK(back.feature_spec.layer_indices == model.feature_spec.layer_indices);
  CHECK(back.feature_spec.use_binary == false);
  CHECK(back.norm_stats.mean == model.norm_stats.mean);

  // reloaded model estimates agree with the f32-rounded original
  const EstimateResult a = estimate(back, features_from(x));
  const EstimateResult b = estimate(load_estimator(path), features_from(x));
  CHECK(a.bucket_index == b.bucket_index);
  std::filesystem::remove(path);
}
