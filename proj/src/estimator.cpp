#include "dpu/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "dpu/checkpoint.hpp"
#include "dpu/error.hpp"

namespace dpu {

namespace {

// Linear interpolation between order statistics (the numpy default):
// q(p) = s[(n-1)p] with fractional indices interpolated.
Real quantile_sorted(const std::vector<Real>& sorted, Real p) {
  const auto n = static_cast<Index>(sorted.size());
  const Real pos = p * Real(n - 1);
  const auto lo = static_cast<Index>(std::floor(pos));
  const auto hi = std::min<Index>(lo + 1, n - 1);
  const Real frac = pos - Real(lo);
  return sorted[lo] * (Real(1) - frac) + sorted[hi] * frac;
}

NetworkSpec estimator_network(Index input_width, const std::vector<int>& hidden,
                              EstimatorMode mode, int buckets) {
  NetworkSpec spec;
  spec.input_width = static_cast<int>(input_width);
  for (int h : hidden) {
    spec.layers.push_back(LayerSpec::dense(h));
    spec.layers.push_back(LayerSpec::relu());
  }
  if (mode == EstimatorMode::Regression) {
    spec.task = Task::regression();
    spec.layers.push_back(LayerSpec::dense(1));
  } else {
    spec.task = Task::multiclass(buckets);
    spec.layers.push_back(LayerSpec::dense(buckets));
    spec.layers.push_back(LayerSpec::softmax());
  }
  return spec;
}

}  // namespace

BucketBoundaries fit_buckets(const Vec& labels, int k) {
  if (k < 2) throw ValidationError("bucket count must be >= 2");
  std::vector<Real> sorted(labels.data(), labels.data() + labels.size());
  std::sort(sorted.begin(), sorted.end());
  const std::set<Real> distinct(sorted.begin(), sorted.end());
  if (static_cast<int>(distinct.size()) < k)
    throw DegenerateError("need at least " + std::to_string(k) +
                          " distinct label values for " + std::to_string(k) + " buckets");
  BucketBoundaries bounds;
  bounds.k = k;
  for (int i = 1; i < k; ++i)
    bounds.boundaries.push_back(quantile_sorted(sorted, Real(i) / Real(k)));
  return bounds;
}

int assign_bucket(Real pu, const BucketBoundaries& bounds) {
  int idx = 0;
  for (Real b : bounds.boundaries) idx += b <= pu;  // ties go to the higher bucket
  return std::min(idx, bounds.k - 1);
}

Real transform_label(Real pu, LabelTransform t, Real eps) {
  return t == LabelTransform::LogScale ? std::log(pu + eps) : pu;
}

Real inverse_transform(Real z, LabelTransform t, Real eps) {
  return t == LabelTransform::LogScale ? std::exp(z) - eps : z;
}

EstimatorModel train_estimator(const FeatureMatrix& features, const Vec& labels,
                               const EstimatorConfig& config, const FeatureSpec& fspec,
                               const NormalizationStats& stats) {
  if (features.values.rows() != labels.size())
    throw ShapeError("train_estimator: feature/label row counts differ");
  if (labels.size() < 2) throw ValidationError("train_estimator: need at least 2 examples");
  if (labels.minCoeff() == labels.maxCoeff())
    throw DegenerateError("train_estimator: all PU labels are equal");

  EstimatorModel model;
  model.mode = config.mode;
  model.transform = config.transform;
  model.log_epsilon = config.log_epsilon;
  model.label_min = labels.minCoeff();
  model.label_max = labels.maxCoeff();
  model.feature_spec = fspec;
  model.norm_stats = stats;

  TrainConfig tc = config.train;
  tc.batch_size = static_cast<int>(std::min<Index>(tc.batch_size, labels.size()));
  Mat y;
  if (config.mode == EstimatorMode::Regression) {
    tc.loss = LossKind::Mse;
    y.resize(labels.size(), 1);
    for (Index i = 0; i < labels.size(); ++i)
      y(i, 0) = transform_label(labels(i), config.transform, config.log_epsilon);
  } else {
    tc.loss = LossKind::SoftmaxCe;
    model.buckets = fit_buckets(labels, config.bucket_count);
    y.resize(labels.size(), 1);
    for (Index i = 0; i < labels.size(); ++i)
      y(i, 0) = assign_bucket(labels(i), model.buckets);
  }

  model.spec = estimator_network(features.values.cols(), config.hidden_widths, config.mode,
                                 config.bucket_count);
  auto result = train(model.spec, features.values, y, tc);
  model.state = std::move(result.state);
  return model;
}

EstimateResult estimate(const EstimatorModel& model, const FeatureMatrix& features) {
  if (features.values.cols() != model.spec.batch_columns())
    throw ShapeError("estimate: feature width " + std::to_string(features.values.cols()) +
                     " does not match the model input " +
                     std::to_string(model.spec.batch_columns()));
  auto [out, trace] = forward(model.spec, model.state, features.values, ForwardMode::eval());

  EstimateResult res;
  if (model.mode == EstimatorMode::Regression) {
    res.values.resize(out.rows());
    for (Index i = 0; i < out.rows(); ++i) {
      const Real raw = inverse_transform(out(i, 0), model.transform, model.log_epsilon);
      res.values(i) = std::clamp(raw, model.label_min, model.label_max);
    }
  } else {
    res.bucket_probabilities = out;
    res.bucket_index.resize(out.rows());
    for (Index i = 0; i < out.rows(); ++i) {
      Index arg;
      out.row(i).maxCoeff(&arg);
      res.bucket_index[i] = static_cast<int>(arg);
    }
  }
  return res;
}

void save_estimator(const std::string& path, const EstimatorModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  save_network(out, model.spec, model.state);

  nlohmann::ordered_json j;
  j["mode"] = model.mode == EstimatorMode::Regression ? "regression" : "classification";
  j["transform"] = model.transform == LabelTransform::Clip ? "clip" : "log_scale";
  j["log_epsilon"] = model.log_epsilon;
  j["label_min"] = model.label_min;
  j["label_max"] = model.label_max;
  j["bucket_count"] = model.buckets.k;
  j["bucket_boundaries"] = model.buckets.boundaries;
  j["feature_layers"] = model.feature_spec.layer_indices;
  j["use_binary"] = model.feature_spec.use_binary;
  j["use_values"] = model.feature_spec.use_values;
  j["norm_mean"] = std::vector<Real>(model.norm_stats.mean.data(),
                                     model.norm_stats.mean.data() + model.norm_stats.mean.size());
  j["norm_sd"] = std::vector<Real>(model.norm_stats.sd.data(),
                                   model.norm_stats.sd.data() + model.norm_stats.sd.size());
  std::vector<int> degen(model.norm_stats.degenerate.begin(), model.norm_stats.degenerate.end());
  j["norm_degenerate"] = degen;
  const std::string extra = j.dump();
  const auto len = static_cast<uint32_t>(extra.size());
  char lenbuf[4] = {char(len & 0xff), char((len >> 8) & 0xff), char((len >> 16) & 0xff),
                    char((len >> 24) & 0xff)};
  out.write(lenbuf, 4);
  out.write(extra.data(), static_cast<std::streamsize>(extra.size()));
  if (!out) throw IoError("write failed: " + path);
}

EstimatorModel load_estimator(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  LoadedNetwork net = load_network(in, /*allow_trailing=*/true);

  char lenbuf[4];
  in.read(lenbuf, 4);
  if (in.gcount() != 4) throw FormatError(path + ": missing estimator section");
  const uint32_t len = uint32_t(uint8_t(lenbuf[0])) | (uint32_t(uint8_t(lenbuf[1])) << 8) |
                       (uint32_t(uint8_t(lenbuf[2])) << 16) |
                       (uint32_t(uint8_t(lenbuf[3])) << 24);
  std::string extra(len, '\0');
  in.read(extra.data(), len);
  if (static_cast<uint32_t>(in.gcount()) != len)
    throw FormatError(path + ": truncated estimator section");

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(extra);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad estimator section: " + e.what());
  }

  EstimatorModel model;
  model.spec = std::move(net.spec);
  model.state = std::move(net.state);
  model.mode = j.at("mode").get<std::string>() == "regression" ? EstimatorMode::Regression
                                                               : EstimatorMode::Classification;
  model.transform = j.at("transform").get<std::string>() == "clip" ? LabelTransform::Clip
                                                                   : LabelTransform::LogScale;
  model.log_epsilon = j.at("log_epsilon").get<Real>();
  model.label_min = j.at("label_min").get<Real>();
  model.label_max = j.at("label_max").get<Real>();
  model.buckets.k = j.at("bucket_count").get<int>();
  model.buckets.boundaries = j.at("bucket_boundaries").get<std::vector<Real>>();
  model.feature_spec.layer_indices = j.at("feature_layers").get<std::vector<int>>();
  model.feature_spec.use_binary = j.at("use_binary").get<bool>();
  model.feature_spec.use_values = j.at("use_values").get<bool>();
  const auto mean = j.at("norm_mean").get<std::vector<Real>>();
  const auto sd = j.at("norm_sd").get<std::vector<Real>>();
  const auto degen = j.at("norm_degenerate").get<std::vector<int>>();
  model.norm_stats.mean = Eigen::Map<const Vec>(mean.data(), static_cast<Index>(mean.size()));
  model.norm_stats.sd = Eigen::Map<const Vec>(sd.data(), static_cast<Index>(sd.size()));
  model.norm_stats.degenerate.assign(degen.begin(), degen.end());
  return model;
}

}  // namespace dpu
