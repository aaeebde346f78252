#include "dpu/pipeline.hpp"

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "dpu/checkpoint.hpp"
#include "dpu/error.hpp"
#include "dpu/features.hpp"
#include "dpu/metrics.hpp"

namespace dpu {

namespace fs = std::filesystem;

namespace stage_seed {
uint64_t split(uint64_t master) { return mix_seed(master, "stage.split"); }
uint64_t target(uint64_t master) { return mix_seed(master, "stage.target"); }
uint64_t side(uint64_t master) { return mix_seed(master, "stage.side"); }
uint64_t mc(uint64_t master) { return mix_seed(master, "stage.mc"); }
uint64_t estimator(uint64_t master) { return mix_seed(master, "stage.estimator"); }
uint64_t ensemble_member(uint64_t master, int index) {
  return mix_seed(mix_seed(master, "stage.ensemble"), static_cast<uint64_t>(index));
}
uint64_t dataset(uint64_t master) { return mix_seed(master, "stage.dataset"); }
}  // namespace stage_seed

namespace {

std::string format_real(Real v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::string rate_tag(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", rate);
  return buf;
}

// Component failures surface with the pipeline stage attached. Validation
// errors pass through untouched so the CLI keeps its exit-code split.
template <typename Fn>
auto with_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ValidationError&) {
    throw;
  } catch (const Error& e) {
    throw Error(std::string("stage ") + stage + ": " + e.what());
  }
}

LossKind loss_for_task(const Task& task) {
  switch (task.kind) {
    case TaskKind::Regression: return LossKind::Mse;
    case TaskKind::BinaryClassification: return LossKind::SigmoidBce;
    case TaskKind::Multiclass: return LossKind::SoftmaxCe;
  }
  return LossKind::Mse;
}

std::vector<int> int_labels(const Mat& y) {
  std::vector<int> out(y.rows());
  for (Index i = 0; i < y.rows(); ++i) out[i] = static_cast<int>(y(i, 0));
  return out;
}

// Task-appropriate quality of one prediction matrix: mse (regression),
// auc (binary), accuracy (multiclass).
std::pair<std::string, Real> prediction_quality(const Task& task, const Mat& preds,
                                                const Mat& y) {
  switch (task.kind) {
    case TaskKind::Regression:
      return {"mse", (preds - y).array().square().mean()};
    case TaskKind::BinaryClassification:
      return {"auc", roc_auc(int_labels(y), preds.col(0))};
    case TaskKind::Multiclass: {
      std::vector<int> hard(preds.rows());
      for (Index i = 0; i < preds.rows(); ++i) {
        Index arg;
        preds.row(i).maxCoeff(&arg);
        hard[i] = static_cast<int>(arg);
      }
      return {"accuracy", accuracy(int_labels(y), hard)};
    }
  }
  return {"mse", 0};
}

struct TrainedTarget {
  NetworkSpec spec;
  NetworkState state;
  std::vector<Real> history;
};

TrainedTarget train_target_model(const ExperimentConfig& cfg, const Dataset& train_set,
                                 bool with_dropout, uint64_t seed) {
  TrainedTarget t;
  t.spec = build_target_spec(cfg, train_set, with_dropout);
  TrainConfig tc = cfg.target_train;
  tc.seed = seed;
  tc.loss = loss_for_task(train_set.task);
  auto result = train(t.spec, train_set.x, train_set.y, tc);
  t.state = std::move(result.state);
  t.history = std::move(result.history);
  return t;
}

void write_histogram_csv(const std::string& path, const Vec& values, int bins = 30) {
  Real lo = values.minCoeff();
  Real hi = values.maxCoeff();
  if (hi <= lo) hi = lo + 1e-9;
  std::vector<int64_t> counts(bins, 0);
  const Real width = (hi - lo) / bins;
  for (Index i = 0; i < values.size(); ++i) {
    auto b = static_cast<int>((values(i) - lo) / width);
    counts[std::clamp(b, 0, bins - 1)] += 1;
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "bin_lo,bin_hi,count\n";
  for (int b = 0; b < bins; ++b)
    out << format_real(lo + b * width) << ',' << format_real(lo + (b + 1) * width) << ','
        << counts[b] << '\n';
}

void write_pu_histograms(const std::string& dir, const Vec& pu, double rate,
                         const Dataset& d_prime) {
  fs::create_directories(dir);
  write_histogram_csv(dir + "/pu_rate" + rate_tag(rate) + ".csv", pu);
  if (d_prime.task.kind != TaskKind::Regression) {
    const int classes =
        d_prime.task.kind == TaskKind::Multiclass ? d_prime.task.classes : 2;
    for (int c = 0; c < classes; ++c) {
      std::vector<Real> vals;
      for (Index i = 0; i < d_prime.size(); ++i)
        if (static_cast<int>(d_prime.y(i, 0)) == c) vals.push_back(pu(i));
      if (vals.size() < 2) continue;
      Vec v = Eigen::Map<Vec>(vals.data(), static_cast<Index>(vals.size()));
      write_histogram_csv(dir + "/pu_rate" + rate_tag(rate) + "_class" + std::to_string(c) +
                              ".csv",
                          v);
    }
  }
}

FeatureMatrix feature_rows(const FeatureMatrix& fm, Index begin, Index count) {
  FeatureMatrix out;
  out.values = fm.values.middleRows(begin, count);
  out.manifest = fm.manifest;
  return out;
}

struct EstimatorOutcome {
  std::optional<Real> r2;
  std::optional<Real> acc;
  std::optional<MatT<int64_t>> conf;
  std::optional<std::vector<Real>> recall;
  EstimatorModel model;  // the last trained mode (classification wins if both)
};

// Trains and evaluates the auxiliary estimator on the D'_train / D'_test
// blocks of `features` and `pu`.
EstimatorOutcome run_estimator(const ExperimentConfig& cfg, const FeatureMatrix& features,
                               const Vec& pu, Index n_train, const FeatureSpec& fspec,
                               const NormalizationStats& stats) {
  const Index n_test = features.values.rows() - n_train;
  const FeatureMatrix f_train = feature_rows(features, 0, n_train);
  const FeatureMatrix f_test = feature_rows(features, n_train, n_test);
  const Vec pu_train = pu.head(n_train);
  const Vec pu_test = pu.tail(n_test);

  EstimatorOutcome out;
  std::vector<EstimatorMode> modes;
  if (cfg.estimator.mode == EstimatorMode::Regression || cfg.run_both_estimators)
    modes.push_back(EstimatorMode::Regression);
  if (cfg.estimator.mode == EstimatorMode::Classification || cfg.run_both_estimators)
    modes.push_back(EstimatorMode::Classification);

  for (EstimatorMode mode : modes) {
    EstimatorConfig ec = cfg.estimator;
    ec.mode = mode;
    ec.train.seed = mix_seed(stage_seed::estimator(cfg.master_seed),
                             mode == EstimatorMode::Regression ? "regression" : "classification");
    EstimatorModel model = train_estimator(f_train, pu_train, ec, fspec, stats);
    EstimateResult est = estimate(model, f_test);
    if (mode == EstimatorMode::Regression) {
      out.r2 = r2_score(pu_test, est.values);
    } else {
      std::vector<int> truth(pu_test.size());
      for (Index i = 0; i < pu_test.size(); ++i)
        truth[i] = assign_bucket(pu_test(i), model.buckets);
      out.acc = accuracy(truth, est.bucket_index);
      out.conf = confusion(truth, est.bucket_index, model.buckets.k);
      out.recall = per_class_recall(*out.conf);
    }
    out.model = std::move(model);
  }
  return out;
}

std::string iso_timestamp() {
  char buf[64];
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hostname() {
  char buf[256] = {0};
  if (gethostname(buf, sizeof(buf) - 1) != 0) return "unknown";
  return buf;
}

void base_metadata(MetricsReport& report, const ExperimentConfig& cfg) {
  report.metadata["dataset"] = cfg.dataset_kind;
  report.metadata["seed"] = std::to_string(cfg.master_seed);
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(cfg.config_hash));
  report.metadata["config_hash"] = hash;
  report.metadata["init_scheme"] = "he_uniform_relu/glorot_uniform";
  report.metadata["r2_convention"] =
      "estimator quality: coefficient of determination; model-to-model: squared pearson";
}

struct PreparedData {
  Dataset full;
  SplitPlan plan;
  Dataset d_train;
  Dataset d_test;
  Dataset d_prime;      // est_train rows then est_test rows
  Index n_est_train = 0;
};

PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData p;
  p.full = load_experiment_dataset(cfg);
  p.plan = split(p.full, stage_seed::split(cfg.master_seed), cfg.train_fraction,
                 cfg.test_fraction);
  p.d_train = subset(p.full, p.plan.train_ids);
  p.d_test = subset(p.full, p.plan.test_ids);
  std::vector<int64_t> prime_ids = p.plan.est_train_ids;
  prime_ids.insert(prime_ids.end(), p.plan.est_test_ids.begin(), p.plan.est_test_ids.end());
  p.d_prime = subset(p.full, prime_ids);
  p.n_est_train = static_cast<Index>(p.plan.est_train_ids.size());

  // Estimator metrics must never touch estimator training rows.
  std::set<int64_t> train_set(p.plan.est_train_ids.begin(), p.plan.est_train_ids.end());
  for (int64_t id : p.plan.est_test_ids)
    if (train_set.count(id)) throw Error("split hygiene violated: D'_train and D'_test overlap");
  return p;
}

// Mean quality of single stochastic dropout draws on held-out data (the
// "inference with dropout" side of the paper's protocol).
Real mc_single_draw_quality(const TrainedTarget& target, const Dataset& d_test, double rate,
                            int draws, uint64_t seed, std::string* metric_name) {
  const PredictionSet preds = mc_predict(target.spec, target.state, d_test.x,
                                         std::max(2, draws), rate, seed);
  Real total = 0;
  for (const Mat& draw : preds.draws) {
    auto [name, value] = prediction_quality(d_test.task, draw, d_test.y);
    if (metric_name) *metric_name = name;
    total += value;
  }
  return total / Real(preds.n_inferences());
}

MetricsReport run_configuration(const ExperimentConfig& cfg, bool config1) {
  validate(cfg);
  PreparedData p = with_stage("prepare_data", [&] { return prepare_data(cfg); });

  // Deployed target: with dropout under configuration 1, without under 2.
  TrainedTarget deployed = with_stage("train_target", [&] {
    return train_target_model(cfg, p.d_train, config1, stage_seed::target(cfg.master_seed));
  });
  int deployed_mc_calls = 0;
  int deployed_eval_calls = 0;

  auto [metric, eval_quality] = [&] {
    ++deployed_eval_calls;
    auto [preds, trace] = forward(deployed.spec, deployed.state, p.d_test.x,
                                  ForwardMode::eval());
    return prediction_quality(p.d_test.task, preds, p.d_test.y);
  }();

  // PU labels: the deployed model itself (config 1) or a disposable side
  // model trained with dropout (config 2).
  Vec pu_scores;
  PuVector::Formula formula;
  int pu_n;
  std::string mc_metric = metric;
  Real mc_quality = 0;
  {
    const TrainedTarget* pu_source = &deployed;
    TrainedTarget side;
    if (!config1) {
      side = with_stage("train_side_target", [&] {
        return train_target_model(cfg, p.d_train, /*with_dropout=*/true,
                                  stage_seed::side(cfg.master_seed));
      });
      pu_source = &side;
    } else {
      deployed_mc_calls += cfg.n_inferences;
    }
    const PredictionSet preds = with_stage("gen_pu", [&] {
      return mc_predict(pu_source->spec, pu_source->state, p.d_prime.x, cfg.n_inferences,
                        cfg.dropout_rate, stage_seed::mc(cfg.master_seed));
    });
    PuVector pu = pu_for_task(preds, p.d_prime.task);
    pu_scores = pu.scores;
    formula = pu.formula;
    pu_n = preds.n_inferences();

    mc_quality = mc_single_draw_quality(*pu_source, p.d_test, cfg.dropout_rate,
                                        std::min(10, cfg.n_inferences),
                                        mix_seed(stage_seed::mc(cfg.master_seed), "test_draws"),
                                        &mc_metric);
    if (config1) deployed_mc_calls += std::min(10, cfg.n_inferences);

    if (!cfg.out_dir.empty()) {
      fs::create_directories(cfg.out_dir + "/checkpoints");
      save_network(cfg.out_dir + "/checkpoints/target.dpum", deployed.spec, deployed.state);
      std::ofstream splitf(cfg.out_dir + "/split.json");
      splitf << split_plan_to_json(p.plan) << '\n';
      write_pu_csv(cfg.out_dir + "/pu_labels.csv", p.d_prime.ids, pu, preds);
      write_pu_histograms(cfg.out_dir + "/histograms", pu_scores, cfg.dropout_rate, p.d_prime);
    }
    // side model goes out of scope here; configuration 2 discards it
  }

  // Activation features always come from the deployed model, eval mode.
  FeatureSpec fspec;
  fspec.layer_indices = select_feature_layers(cfg, deployed.spec);
  fspec.use_binary = cfg.use_binary;
  fspec.use_values = cfg.use_values;
  ++deployed_eval_calls;
  const Mat raw = with_stage("extract_features", [&] {
    return capture_activations(deployed.spec, deployed.state, p.d_prime.x,
                               fspec.layer_indices);
  });
  const NormalizationStats stats = fit_normalization(raw.topRows(p.n_est_train));
  const FeatureMatrix features = build_features(raw, fspec, deployed.spec, &stats);

  EstimatorOutcome est = with_stage("train_estimator", [&] {
    return run_estimator(cfg, features, pu_scores, p.n_est_train, fspec, stats);
  });

  MetricsReport report;
  base_metadata(report, cfg);
  report.metadata["configuration"] = config1 ? "config1" : "config2";
  report.metadata["pu_formula"] = to_string(formula);
  report.metadata["target_quality_metric"] = metric;
  report.metadata["target_seed"] = std::to_string(stage_seed::target(cfg.master_seed));
  if (!config1) {
    report.metadata["side_seed"] = std::to_string(stage_seed::side(cfg.master_seed));
    report.metadata["deployed_forward_modes"] = "eval_only";
  }
  report.scalars["target_quality"] = eval_quality;
  report.scalars["target_eval_" + metric] = eval_quality;
  report.scalars["target_mc_" + mc_metric + "_mean"] = mc_quality;
  report.scalars["deployed_mc_calls"] = config1 ? Real(deployed_mc_calls) : 0.0;
  report.scalars["deployed_eval_calls"] = Real(deployed_eval_calls);
  report.scalars["dropout_rate"] = cfg.dropout_rate;
  report.scalars["n_inferences"] = Real(pu_n);
  report.scalars["seed"] = Real(cfg.master_seed);
  auto [pu_mean, pu_sd] = summary_stats(pu_scores);
  report.scalars["pu_mean"] = pu_mean;
  report.scalars["pu_sd"] = pu_sd;
  report.scalars["estimator_params"] =
      Real(estimator_parameter_count(features.values.cols(), cfg.estimator.hidden_widths));
  if (est.r2) report.scalars["estimator_r2"] = *est.r2;
  if (est.acc) report.scalars["estimator_accuracy"] = *est.acc;
  if (est.conf) report.confusion = est.conf;
  if (est.recall) report.bucket_recall = est.recall;

  if (!cfg.out_dir.empty()) {
    write_feature_csv(cfg.out_dir + "/features.csv", p.d_prime.ids, features);
    write_feature_manifest(cfg.out_dir + "/features_manifest.txt", features);
    write_normalization_csv(cfg.out_dir + "/norm_stats.csv", stats);
    save_estimator(cfg.out_dir + "/checkpoints/estimator.dpum", est.model);
    if (est.conf) write_confusion_csv(cfg.out_dir + "/confusion.csv", *est.conf);
    write_report_json(cfg.out_dir + "/report.json", report);
    if (cfg.report_format == "csv") {
      std::ofstream out(cfg.out_dir + "/report.csv");
      out << "key,value\n";
      for (const auto& [k, v] : report.scalars) out << k << ',' << format_real(v) << '\n';
    }
  }
  return report;
}

}  // namespace

int64_t estimator_parameter_count(int64_t inputs, const std::vector<int>& hidden) {
  int64_t total = 0;
  int64_t prev = inputs;
  for (int h : hidden) {
    total += prev * h;
    prev = h;
  }
  total += prev * 1;
  return total;
}

ExperimentConfig experiment_from_config(const ConfigMap& cfg) {
  ExperimentConfig e;
  const std::string configuration = cfg.get_string("configuration", "config1");
  if (configuration == "config1") e.configuration = Configuration::Config1;
  else if (configuration == "config2") e.configuration = Configuration::Config2;
  else throw ValidationError("configuration must be config1 or config2");

  e.dataset_kind = cfg.get_string("dataset.kind", "synthetic_hetero");
  e.dataset_n = cfg.get_int("dataset.n", 8000);
  e.noise.sigma_low = cfg.get_real("dataset.noise_low", e.noise.sigma_low);
  e.noise.sigma_high = cfg.get_real("dataset.noise_high", e.noise.sigma_high);
  e.noise.blob_sd = cfg.get_real("dataset.blob_sd", e.noise.blob_sd);
  e.noise.classes = static_cast<int>(cfg.get_int("dataset.classes", e.noise.classes));
  e.train_fraction = cfg.get_real("dataset.train_fraction", 0.5);
  e.test_fraction = cfg.get_real("dataset.test_fraction", 1.0 - e.train_fraction);
  e.idx_images = cfg.get_string("dataset.idx_images", "");
  e.idx_labels = cfg.get_string("dataset.idx_labels", "");
  e.idx_classes = static_cast<int>(cfg.get_int("dataset.idx_classes", 10));
  e.csv_path = cfg.get_string("dataset.csv_path", "");
  e.schema_path = cfg.get_string("dataset.schema_path", "");

  e.target_hidden = cfg.get_int_list("target.hidden", e.target_hidden);
  e.embedding_dims = cfg.get_int_list("target.embedding_dims", {});
  e.target_batch_norm = cfg.get_bool("target.batch_norm", true);
  e.dropout_rate = cfg.get_real("target.dropout_rate", 0.1);
  e.target_train.epochs = static_cast<int>(cfg.get_int("train.epochs", 20));
  e.target_train.batch_size = static_cast<int>(cfg.get_int("train.batch_size", 128));
  e.target_train.learning_rate = cfg.get_real("train.learning_rate", 1e-3);
  e.target_train.lr_decay_epochs = cfg.get_int_list("train.decay_epochs", {});
  e.target_train.lr_decay_factor = cfg.get_real("train.decay_factor", 1.0);

  const std::string layers = cfg.get_string("features.layers", "all");
  if (layers == "all") e.feature_layers = LayerSubset::All;
  else if (layers == "bottom2") e.feature_layers = LayerSubset::Bottom2;
  else if (layers == "bottom") e.feature_layers = LayerSubset::Bottom;
  else {
    e.feature_layers = LayerSubset::Explicit;
    std::stringstream ss(layers);
    int idx;
    while (ss >> idx) e.explicit_layer_indices.push_back(idx);
    if (e.explicit_layer_indices.empty())
      throw ValidationError("features.layers must be all|bottom2|bottom or index list");
  }
  e.use_binary = cfg.get_bool("features.binary", true);
  e.use_values = cfg.get_bool("features.values", true);

  const std::string mode = cfg.get_string("estimator.mode", "both");
  if (mode == "regression") e.estimator.mode = EstimatorMode::Regression;
  else if (mode == "classification") e.estimator.mode = EstimatorMode::Classification;
  else if (mode == "both") e.run_both_estimators = true;
  else throw ValidationError("estimator.mode must be regression, classification or both");
  e.estimator.hidden_widths = cfg.get_int_list("estimator.hidden", {100, 50});
  const std::string transform = cfg.get_string("estimator.transform", "clip");
  if (transform == "clip") e.estimator.transform = LabelTransform::Clip;
  else if (transform == "log" || transform == "log_scale")
    e.estimator.transform = LabelTransform::LogScale;
  else throw ValidationError("estimator.transform must be clip or log");
  e.estimator.log_epsilon = cfg.get_real("estimator.log_epsilon", 1e-8);
  e.estimator.bucket_count = static_cast<int>(cfg.get_int("estimator.buckets", 5));
  e.estimator.train.epochs = static_cast<int>(cfg.get_int("estimator.epochs", 50));
  e.estimator.train.batch_size = static_cast<int>(cfg.get_int("estimator.batch_size", 128));
  e.estimator.train.learning_rate = cfg.get_real("estimator.learning_rate", 1e-3);
  e.estimator.train.lr_decay_epochs = cfg.get_int_list("estimator.decay_epochs", {30, 40});
  e.estimator.train.lr_decay_factor = cfg.get_real("estimator.decay_factor", 0.1);

  e.rate_grid = cfg.get_real_list("experiment.rates", e.rate_grid);
  e.n_inferences = static_cast<int>(cfg.get_int("experiment.n_inferences", 100));
  e.retrain_count = static_cast<int>(cfg.get_int("experiment.retrains", 2));
  e.seed_count = static_cast<int>(cfg.get_int("experiment.seeds", 5));
  e.ensemble_size = static_cast<int>(cfg.get_int("experiment.ensemble_size", 10));
  e.ensemble_seeds = cfg.get_int_list("experiment.ensemble_seeds", {});
  e.master_seed = cfg.get_u64("seed", 1);
  e.out_dir = cfg.get_string("out", "");
  e.report_format = cfg.get_string("format", "json");
  e.config_hash = cfg.hash();
  return e;
}

void validate(const ExperimentConfig& cfg) {
  if (!(cfg.dropout_rate > 0.0 && cfg.dropout_rate < 1.0))
    throw ValidationError("target.dropout_rate must be in (0, 1)");
  if (cfg.n_inferences < 2) throw ValidationError("experiment.n_inferences must be >= 2");
  if (cfg.target_hidden.empty()) throw ValidationError("target.hidden must be nonempty");
  if (cfg.report_format != "json" && cfg.report_format != "csv")
    throw ValidationError("format must be json or csv");
}

Dataset load_experiment_dataset(const ExperimentConfig& cfg) {
  const uint64_t seed = stage_seed::dataset(cfg.master_seed);
  if (cfg.dataset_kind == "synthetic_hetero")
    return gen_synthetic(TaskKind::Regression, cfg.dataset_n, seed, cfg.noise);
  if (cfg.dataset_kind == "synthetic_blobs")
    return gen_synthetic(TaskKind::Multiclass, cfg.dataset_n, seed, cfg.noise);
  if (cfg.dataset_kind == "synthetic_binary")
    return gen_synthetic(TaskKind::BinaryClassification, cfg.dataset_n, seed, cfg.noise);
  if (cfg.dataset_kind == "idx") {
    if (cfg.idx_images.empty() || cfg.idx_labels.empty())
      throw ValidationError("idx dataset needs dataset.idx_images and dataset.idx_labels");
    return idx_to_dataset(load_idx(cfg.idx_images), load_idx(cfg.idx_labels),
                          cfg.idx_classes);
  }
  if (cfg.dataset_kind == "rating_csv") {
    if (cfg.csv_path.empty() || cfg.schema_path.empty())
      throw ValidationError("rating_csv dataset needs dataset.csv_path and dataset.schema_path");
    RatingCsv loaded = load_rating_csv(cfg.csv_path, load_csv_schema(cfg.schema_path));
    if (!cfg.out_dir.empty()) {
      fs::create_directories(cfg.out_dir);
      write_category_map(cfg.out_dir + "/category_map.json", loaded.categories);
    }
    return loaded.dataset;
  }
  throw ValidationError("unknown dataset.kind '" + cfg.dataset_kind + "'");
}

NetworkSpec build_target_spec(const ExperimentConfig& cfg, const Dataset& ds,
                              bool with_dropout) {
  NetworkSpec spec;
  spec.task = ds.task;
  spec.input_width = ds.numeric_columns();
  for (size_t c = 0; c < ds.cat_vocab_sizes.size(); ++c) {
    const int dim = c < cfg.embedding_dims.size() ? cfg.embedding_dims[c] : 8;
    spec.layers.push_back(LayerSpec::embedding(ds.cat_vocab_sizes[c], dim));
  }
  for (int h : cfg.target_hidden) {
    spec.layers.push_back(LayerSpec::dense(h));
    if (cfg.target_batch_norm) spec.layers.push_back(LayerSpec::batch_norm());
    spec.layers.push_back(LayerSpec::relu());
    if (with_dropout) spec.layers.push_back(LayerSpec::dropout(cfg.dropout_rate));
  }
  switch (ds.task.kind) {
    case TaskKind::Regression:
      spec.layers.push_back(LayerSpec::dense(1));
      break;
    case TaskKind::BinaryClassification:
      spec.layers.push_back(LayerSpec::dense(1));
      spec.layers.push_back(LayerSpec::sigmoid());
      break;
    case TaskKind::Multiclass:
      spec.layers.push_back(LayerSpec::dense(ds.task.classes));
      spec.layers.push_back(LayerSpec::softmax());
      break;
  }
  validate(spec);
  return spec;
}

std::vector<int> select_feature_layers(const ExperimentConfig& cfg, const NetworkSpec& net) {
  const auto fcl = net.fcl_layer_indices();
  if (fcl.empty()) throw ValidationError("target network has no post-ReLU FCLs");
  switch (cfg.feature_layers) {
    case LayerSubset::All:
      return fcl;
    case LayerSubset::Bottom2:
      return {fcl.begin(), fcl.begin() + std::min<size_t>(2, fcl.size())};
    case LayerSubset::Bottom:
      return {fcl.front()};
    case LayerSubset::Explicit:
      return cfg.explicit_layer_indices;
  }
  return fcl;
}

MetricsReport run_config1(const ExperimentConfig& cfg) { return run_configuration(cfg, true); }

MetricsReport run_config2(const ExperimentConfig& cfg) { return run_configuration(cfg, false); }

MetricsReport run_sensitivity(const ExperimentConfig& cfg) {
  validate(cfg);
  if (cfg.retrain_count < 1) throw ValidationError("experiment.retrains must be >= 1");
  PreparedData p = prepare_data(cfg);

  std::vector<int> n_list;
  for (int n : {10, 50, 100})
    if (n <= cfg.n_inferences) n_list.push_back(n);
  if (n_list.empty() || n_list.back() != cfg.n_inferences) n_list.push_back(cfg.n_inferences);

  const auto n_rates = cfg.rate_grid.size();
  // pu[rate][pair][replica]
  std::vector<std::vector<std::array<PredictionSet, 2>>> preds(n_rates);
  for (size_t ri = 0; ri < n_rates; ++ri) {
    preds[ri].resize(cfg.retrain_count);
    for (int pair = 0; pair < cfg.retrain_count; ++pair) {
      for (int rep = 0; rep < 2; ++rep) {
        ExperimentConfig one = cfg;
        one.dropout_rate = cfg.rate_grid[ri];
        const uint64_t seed = mix_seed(
            mix_seed(stage_seed::target(cfg.master_seed), static_cast<uint64_t>(ri)),
            static_cast<uint64_t>(pair * 2 + rep));
        TrainedTarget t = train_target_model(one, p.d_train, /*with_dropout=*/true, seed);
        preds[ri][pair][rep] =
            mc_predict(t.spec, t.state, p.d_prime.x, cfg.n_inferences, cfg.rate_grid[ri],
                       mix_seed(stage_seed::mc(cfg.master_seed), seed));
      }
    }
  }

  MetricsReport report;
  base_metadata(report, cfg);
  report.metadata["experiment"] = "sensitivity";
  report.scalars["n_inferences"] = Real(cfg.n_inferences);
  report.scalars["retrain_pairs"] = Real(cfg.retrain_count);

  for (int n : n_list) {
    Mat corr(n_rates, n_rates);
    for (size_t a = 0; a < n_rates; ++a) {
      for (size_t b = 0; b < n_rates; ++b) {
        Real total = 0;
        for (int pair = 0; pair < cfg.retrain_count; ++pair) {
          const Vec pa = pu_for_task(truncate(preds[a][pair][0], n), p.d_prime.task).scores;
          const Vec pb = pu_for_task(truncate(preds[b][pair][1], n), p.d_prime.task).scores;
          total += pearson_sq(pa, pb);
        }
        corr(a, b) = total / Real(cfg.retrain_count);
        report.scalars["corr_n" + std::to_string(n) + "_r" + rate_tag(cfg.rate_grid[a]) +
                       "_r" + rate_tag(cfg.rate_grid[b])] = corr(a, b);
      }
    }
    if (!cfg.out_dir.empty()) {
      fs::create_directories(cfg.out_dir);
      std::ofstream out(cfg.out_dir + "/correlation_n" + std::to_string(n) + ".csv");
      out << "rate";
      for (double r : cfg.rate_grid) out << ',' << rate_tag(r);
      out << '\n';
      for (size_t a = 0; a < n_rates; ++a) {
        out << rate_tag(cfg.rate_grid[a]);
        for (size_t b = 0; b < n_rates; ++b) out << ',' << format_real(corr(a, b));
        out << '\n';
      }
    }
  }
  if (!cfg.out_dir.empty()) write_report_json(cfg.out_dir + "/report.json", report);
  return report;
}

MetricsReport run_layer_ablation(const ExperimentConfig& cfg) {
  validate(cfg);
  PreparedData p = prepare_data(cfg);
  TrainedTarget target =
      train_target_model(cfg, p.d_train, /*with_dropout=*/true,
                         stage_seed::target(cfg.master_seed));
  const auto fcl = target.spec.fcl_layer_indices();
  if (fcl.size() < 2)
    throw ValidationError("layer ablation needs a target with >= 2 FCLs");

  const PredictionSet preds =
      mc_predict(target.spec, target.state, p.d_prime.x, cfg.n_inferences, cfg.dropout_rate,
                 stage_seed::mc(cfg.master_seed));
  const Vec pu = pu_for_task(preds, p.d_prime.task).scores;

  struct Variant {
    std::string name;
    std::vector<int> layers;
  };
  std::vector<Variant> variants;
  variants.push_back({"all_fcls", fcl});
  if (fcl.size() > 2)
    variants.push_back({"bottom2_fcls", {fcl.begin(), fcl.begin() + 2}});
  variants.push_back({"bottom_fcl", {fcl.front()}});

  MetricsReport report;
  base_metadata(report, cfg);
  report.metadata["experiment"] = "layer_ablation";
  report.scalars["dropout_rate"] = cfg.dropout_rate;

  Real params_all = 0;
  for (const auto& variant : variants) {
    FeatureSpec fspec;
    fspec.layer_indices = variant.layers;
    fspec.use_binary = cfg.use_binary;
    fspec.use_values = cfg.use_values;
    const Mat raw =
        capture_activations(target.spec, target.state, p.d_prime.x, variant.layers);
    const NormalizationStats stats = fit_normalization(raw.topRows(p.n_est_train));
    const FeatureMatrix features = build_features(raw, fspec, target.spec, &stats);

    ExperimentConfig one = cfg;
    one.run_both_estimators = false;
    one.estimator.mode = EstimatorMode::Regression;
    EstimatorOutcome out = run_estimator(one, features, pu, p.n_est_train, fspec, stats);

    const auto params =
        estimator_parameter_count(features.values.cols(), cfg.estimator.hidden_widths);
    report.scalars["r2_" + variant.name] = out.r2.value();
    report.scalars["params_" + variant.name] = Real(params);
    if (variant.name == "all_fcls") params_all = Real(params);
    else
      report.scalars["params_reduction_pct_" + variant.name] =
          Real(100) * (params_all - Real(params)) / params_all;
  }
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    write_report_json(cfg.out_dir + "/report.json", report);
  }
  return report;
}

MetricsReport run_ensemble_baseline(const ExperimentConfig& cfg) {
  validate(cfg);
  if (cfg.ensemble_size < 2 && cfg.ensemble_seeds.size() < 2)
    throw ValidationError("ensemble baseline needs >= 2 members");
  PreparedData p = prepare_data(cfg);

  std::vector<uint64_t> member_seeds;
  if (!cfg.ensemble_seeds.empty())
    member_seeds.assign(cfg.ensemble_seeds.begin(), cfg.ensemble_seeds.end());
  else
    for (int i = 0; i < cfg.ensemble_size; ++i)
      member_seeds.push_back(stage_seed::ensemble_member(cfg.master_seed, i));

  std::vector<TrainedTarget> members;
  members.reserve(member_seeds.size());
  for (uint64_t seed : member_seeds)
    members.push_back(train_target_model(cfg, p.d_train, /*with_dropout=*/false, seed));

  std::vector<std::pair<const NetworkSpec*, const NetworkState*>> model_ptrs;
  for (const auto& m : members) model_ptrs.emplace_back(&m.spec, &m.state);
  const PredictionSet ens_preds = ensemble_predict(model_ptrs, p.d_prime.x);
  const Vec ens_pu = pu_for_task(ens_preds, p.d_prime.task).scores;

  MetricsReport report;
  base_metadata(report, cfg);
  report.metadata["experiment"] = "ensemble_baseline";
  report.scalars["ensemble_size"] = Real(member_seeds.size());
  auto [ens_mean, ens_sd] = summary_stats(ens_pu);
  report.scalars["ensemble_pu_mean"] = ens_mean;
  report.scalars["ensemble_pu_sd"] = ens_sd;
  const std::set<uint64_t> distinct(member_seeds.begin(), member_seeds.end());
  report.scalars["ensemble_degenerate"] =
      (distinct.size() == 1 || ens_pu.maxCoeff() == Real(0)) ? 1.0 : 0.0;

  // One dropout-trained model per rate for the side-by-side PU rows.
  for (size_t ri = 0; ri < cfg.rate_grid.size(); ++ri) {
    ExperimentConfig one = cfg;
    one.dropout_rate = cfg.rate_grid[ri];
    TrainedTarget t = train_target_model(
        one, p.d_train, /*with_dropout=*/true,
        mix_seed(stage_seed::target(cfg.master_seed), static_cast<uint64_t>(ri)));
    const PredictionSet preds =
        mc_predict(t.spec, t.state, p.d_prime.x, cfg.n_inferences, cfg.rate_grid[ri],
                   mix_seed(stage_seed::mc(cfg.master_seed), static_cast<uint64_t>(ri)));
    const Vec pu = pu_for_task(preds, p.d_prime.task).scores;
    auto [mean, sd] = summary_stats(pu);
    report.scalars["dropout_pu_mean_r" + rate_tag(cfg.rate_grid[ri])] = mean;
    report.scalars["dropout_pu_sd_r" + rate_tag(cfg.rate_grid[ri])] = sd;
    if (!cfg.out_dir.empty())
      write_pu_histograms(cfg.out_dir + "/histograms", pu, cfg.rate_grid[ri], p.d_prime);
  }
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    write_report_json(cfg.out_dir + "/report.json", report);
  }
  return report;
}

MetricsReport run_experiment(const ExperimentConfig& cfg) {
  return cfg.configuration == Configuration::Config1 ? run_config1(cfg) : run_config2(cfg);
}

void write_report_json(const std::string& path, const MetricsReport& report) {
  nlohmann::ordered_json doc;
  doc["payload"] = nlohmann::ordered_json::parse(report.to_json());
  doc["env"]["timestamp"] = iso_timestamp();
  doc["env"]["host"] = hostname();
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << doc.dump(2) << '\n';
}

// ---- stage subcommands ----

void stage_train_target(const ExperimentConfig& cfg) {
  validate(cfg);
  if (cfg.out_dir.empty()) throw ValidationError("train-target needs --out");
  PreparedData p = prepare_data(cfg);
  const bool with_dropout = cfg.configuration == Configuration::Config1;
  TrainedTarget t =
      train_target_model(cfg, p.d_train, with_dropout, stage_seed::target(cfg.master_seed));

  fs::create_directories(cfg.out_dir + "/checkpoints");
  save_network(cfg.out_dir + "/checkpoints/target.dpum", t.spec, t.state);
  std::ofstream splitf(cfg.out_dir + "/split.json");
  splitf << split_plan_to_json(p.plan) << '\n';

  auto [preds, trace] = forward(t.spec, t.state, p.d_test.x, ForwardMode::eval());
  auto [metric, quality] = prediction_quality(p.d_test.task, preds, p.d_test.y);
  MetricsReport report;
  base_metadata(report, cfg);
  report.metadata["stage"] = "train-target";
  report.metadata["target_quality_metric"] = metric;
  report.scalars["target_quality"] = quality;
  report.scalars["final_train_loss"] = t.history.empty() ? Real(0) : t.history.back();
  write_report_json(cfg.out_dir + "/target_report.json", report);
}

void stage_gen_pu(const ExperimentConfig& cfg, const std::string& checkpoint_path) {
  validate(cfg);
  if (cfg.out_dir.empty()) throw ValidationError("gen-pu needs --out");
  PreparedData p = prepare_data(cfg);

  PredictionSet preds;
  if (cfg.configuration == Configuration::Config1) {
    LoadedNetwork net = load_network(checkpoint_path);
    preds = mc_predict(net.spec, net.state, p.d_prime.x, cfg.n_inferences, cfg.dropout_rate,
                       stage_seed::mc(cfg.master_seed));
  } else {
    // Configuration 2: the PU source is a disposable dropout-trained side
    // model, not the deployed checkpoint.
    TrainedTarget side = train_target_model(cfg, p.d_train, /*with_dropout=*/true,
                                            stage_seed::side(cfg.master_seed));
    preds = mc_predict(side.spec, side.state, p.d_prime.x, cfg.n_inferences, cfg.dropout_rate,
                       stage_seed::mc(cfg.master_seed));
  }
  const PuVector pu = pu_for_task(preds, p.d_prime.task);
  fs::create_directories(cfg.out_dir);
  write_pu_csv(cfg.out_dir + "/pu_labels.csv", p.d_prime.ids, pu, preds);
  write_pu_histograms(cfg.out_dir + "/histograms", pu.scores, cfg.dropout_rate, p.d_prime);
}

void stage_extract_features(const ExperimentConfig& cfg, const std::string& checkpoint_path) {
  validate(cfg);
  if (cfg.out_dir.empty()) throw ValidationError("extract-features needs --out");
  PreparedData p = prepare_data(cfg);
  LoadedNetwork net = load_network(checkpoint_path);

  FeatureSpec fspec;
  fspec.layer_indices = select_feature_layers(cfg, net.spec);
  fspec.use_binary = cfg.use_binary;
  fspec.use_values = cfg.use_values;
  const Mat raw = capture_activations(net.spec, net.state, p.d_prime.x, fspec.layer_indices);
  const NormalizationStats stats = fit_normalization(raw.topRows(p.n_est_train));
  const FeatureMatrix features = build_features(raw, fspec, net.spec, &stats);

  fs::create_directories(cfg.out_dir);
  write_feature_csv(cfg.out_dir + "/features.csv", p.d_prime.ids, features);
  write_feature_manifest(cfg.out_dir + "/features_manifest.txt", features);
  write_normalization_csv(cfg.out_dir + "/norm_stats.csv", stats);
}

namespace {

// Reconstructs the FeatureSpec from manifest column names (layer<i>_n<j>_kind).
FeatureSpec feature_spec_from_manifest(const std::vector<std::string>& manifest) {
  FeatureSpec fspec;
  fspec.use_binary = false;
  fspec.use_values = false;
  std::set<int> layers;
  for (const auto& name : manifest) {
    int layer, neuron;
    char kind[8] = {0};
    if (std::sscanf(name.c_str(), "layer%d_n%d_%7s", &layer, &neuron, kind) != 3)
      throw FormatError("bad feature column name '" + name + "'");
    layers.insert(layer);
    if (std::string(kind) == "bin") fspec.use_binary = true;
    if (std::string(kind) == "val") fspec.use_values = true;
  }
  fspec.layer_indices.assign(layers.begin(), layers.end());
  return fspec;
}

struct AlignedRows {
  FeatureMatrix features;
  Vec pu;
};

AlignedRows align_by_id(const FeatureCsv& features, const PuCsv& pu,
                        const std::vector<int64_t>& wanted_ids) {
  std::map<int64_t, Index> feature_row, pu_row;
  for (size_t i = 0; i < features.example_ids.size(); ++i)
    feature_row[features.example_ids[i]] = static_cast<Index>(i);
  for (size_t i = 0; i < pu.example_ids.size(); ++i)
    pu_row[pu.example_ids[i]] = static_cast<Index>(i);

  AlignedRows out;
  out.features.manifest = features.manifest;
  out.features.values.resize(static_cast<Index>(wanted_ids.size()), features.values.cols());
  out.pu.resize(static_cast<Index>(wanted_ids.size()));
  for (size_t i = 0; i < wanted_ids.size(); ++i) {
    const auto fit = feature_row.find(wanted_ids[i]);
    const auto pit = pu_row.find(wanted_ids[i]);
    if (fit == feature_row.end() || pit == pu_row.end())
      throw ValidationError("example id " + std::to_string(wanted_ids[i]) +
                            " missing from features.csv or pu_labels.csv");
    out.features.values.row(static_cast<Index>(i)) = features.values.row(fit->second);
    out.pu(static_cast<Index>(i)) = pu.pu(pit->second);
  }
  return out;
}

}  // namespace

void stage_train_estimator(const ExperimentConfig& cfg, const std::string& features_csv,
                           const std::string& pu_csv) {
  validate(cfg);
  if (cfg.out_dir.empty()) throw ValidationError("train-estimator needs --out");
  PreparedData p = prepare_data(cfg);
  const FeatureCsv features = read_feature_csv(features_csv);
  const PuCsv pu = read_pu_csv(pu_csv);

  const AlignedRows train_rows = align_by_id(features, pu, p.plan.est_train_ids);
  const FeatureSpec fspec = feature_spec_from_manifest(features.manifest);
  const NormalizationStats stats =
      read_normalization_csv(fs::path(features_csv).parent_path() / "norm_stats.csv");

  EstimatorConfig ec = cfg.estimator;
  if (cfg.run_both_estimators) ec.mode = EstimatorMode::Regression;
  ec.train.seed = mix_seed(stage_seed::estimator(cfg.master_seed),
                           ec.mode == EstimatorMode::Regression ? "regression"
                                                                : "classification");
  const EstimatorModel model = train_estimator(train_rows.features, train_rows.pu, ec, fspec,
                                               stats);
  fs::create_directories(cfg.out_dir + "/checkpoints");
  save_estimator(cfg.out_dir + "/checkpoints/estimator.dpum", model);
}

MetricsReport stage_evaluate(const ExperimentConfig& cfg, const std::string& estimator_ckpt,
                             const std::string& features_csv, const std::string& pu_csv) {
  validate(cfg);
  PreparedData p = prepare_data(cfg);
  const FeatureCsv features = read_feature_csv(features_csv);
  const PuCsv pu = read_pu_csv(pu_csv);
  const EstimatorModel model = load_estimator(estimator_ckpt);

  // Hygiene: evaluation rows are exactly D'_test, never estimator training rows.
  const AlignedRows test_rows = align_by_id(features, pu, p.plan.est_test_ids);
  const EstimateResult est = estimate(model, test_rows.features);

  MetricsReport report;
  base_metadata(report, cfg);
  report.metadata["stage"] = "evaluate";
  report.scalars["dropout_rate"] = pu.dropout_rate;
  report.scalars["n_inferences"] = Real(pu.n_inferences);
  if (model.mode == EstimatorMode::Regression) {
    report.scalars["estimator_r2"] = r2_score(test_rows.pu, est.values);
  } else {
    std::vector<int> truth(test_rows.pu.size());
    for (Index i = 0; i < test_rows.pu.size(); ++i)
      truth[i] = assign_bucket(test_rows.pu(i), model.buckets);
    report.scalars["estimator_accuracy"] = accuracy(truth, est.bucket_index);
    report.confusion = confusion(truth, est.bucket_index, model.buckets.k);
    report.bucket_recall = per_class_recall(*report.confusion);
  }
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    write_report_json(cfg.out_dir + "/report.json", report);
    if (report.confusion)
      write_confusion_csv(cfg.out_dir + "/confusion.csv", *report.confusion);
    if (cfg.report_format == "csv") {
      std::ofstream out(cfg.out_dir + "/report.csv");
      out << "key,value\n";
      for (const auto& [k, v] : report.scalars) out << k << ',' << format_real(v) << '\n';
    }
  }
  return report;
}

}  // namespace dpu
