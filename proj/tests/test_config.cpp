#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dpu/config.hpp"
#include "dpu/error.hpp"
#include "dpu/pipeline.hpp"

using namespace dpu;

namespace {

const char* kSample = R"(
# synthetic regression experiment
configuration: config2
seed: 42

[dataset]
kind: synthetic_hetero
n: 1234
noise_low: 0.02
noise_high: 0.4

[target]
hidden: 48 24
dropout_rate: 0.2
batch_norm: false

[train]
epochs: 9
decay_epochs: 5 7
decay_factor: 0.5

[features]
layers: bottom2
binary: true
values: false

[estimator]
mode: regression
transform: log
hidden: 40 20

[experiment]
rates: 0.1 0.3
n_inferences: 25
)";

}  // namespace

TEST_CASE("config parsing: sections, comments, typed lookups") {
  const ConfigMap cfg = ConfigMap::parse_text(kSample);
  CHECK(cfg.get_string("configuration") == "config2");
  CHECK(cfg.get_int("dataset.n") == 1234);
  CHECK(cfg.get_real("dataset.noise_high") == doctest::Approx(0.4));
  CHECK(cfg.get_bool("target.batch_norm", true) == false);
  CHECK(cfg.get_int_list("target.hidden", {}) == std::vector<int>{48, 24});
  CHECK(cfg.get_real_list("experiment.rates", {}) == std::vector<double>{0.1, 0.3});
  CHECK(cfg.get_string("missing.key", "fallback") == "fallback");
  CHECK_THROWS_AS(cfg.get_string("missing.key"), ValidationError);
  CHECK_THROWS_AS(cfg.get_int("dataset.kind"), ValidationError);
}

TEST_CASE("config canonical text and hash are stable") {
  const ConfigMap a = ConfigMap::parse_text("b: 2\na: 1\n");
  const ConfigMap b = ConfigMap::parse_text("a: 1\n# comment\nb: 2\n");
  CHECK(a.canonical_text() == b.canonical_text());
  CHECK(a.hash() == b.hash());
  const ConfigMap c = ConfigMap::parse_text("a: 1\nb: 3\n");
  CHECK(a.hash() != c.hash());
}

TEST_CASE("malformed lines are rejected") {
  CHECK_THROWS_AS(ConfigMap::parse_text("no colon here\n"), ValidationError);
  CHECK_THROWS_AS(ConfigMap::parse_text(": empty key\n"), ValidationError);
}

TEST_CASE("experiment config picks up every section") {
  ConfigMap cfg = ConfigMap::parse_text(kSample);
  const ExperimentConfig e = experiment_from_config(cfg);
  CHECK(e.configuration == Configuration::Config2);
  CHECK(e.master_seed == 42);
  CHECK(e.dataset_n == 1234);
  CHECK(e.noise.sigma_low == doctest::Approx(0.02));
  CHECK(e.target_hidden == std::vector<int>{48, 24});
  CHECK(e.dropout_rate == doctest::Approx(0.2));
  CHECK(e.target_batch_norm == false);
  CHECK(e.target_train.epochs == 9);
  CHECK(e.target_train.lr_decay_epochs == std::vector<int>{5, 7});
  CHECK(e.feature_layers == LayerSubset::Bottom2);
  CHECK(e.use_values == false);
  CHECK(e.estimator.mode == EstimatorMode::Regression);
  CHECK(e.run_both_estimators == false);
  CHECK(e.estimator.transform == LabelTransform::LogScale);
  CHECK(e.estimator.hidden_widths == std::vector<int>{40, 20});
  CHECK(e.rate_grid == std::vector<double>{0.1, 0.3});
  CHECK(e.n_inferences == 25);
  CHECK(e.config_hash == cfg.hash());

  // estimator defaults follow the 50-epoch decay schedule
  CHECK(e.estimator.train.epochs == 50);
  CHECK(e.estimator.train.lr_decay_epochs == std::vector<int>{30, 40});
  CHECK(e.estimator.train.lr_decay_factor == doctest::Approx(0.1));
}

TEST_CASE("experiment config validation") {
  ConfigMap cfg = ConfigMap::parse_text("configuration: config1\n");
  ExperimentConfig e = experiment_from_config(cfg);
  e.dropout_rate = 0.0;
  CHECK_THROWS_AS(validate(e), ValidationError);
  e.dropout_rate = 0.1;
  CHECK_NOTHROW(validate(e));

  CHECK_THROWS_AS(experiment_from_config(ConfigMap::parse_text("configuration: config9\n")),
                  ValidationError);
  CHECK_THROWS_AS(experiment_from_config(ConfigMap::parse_text("estimator.mode: nope\n")),
                  ValidationError);
}

TEST_CASE("cli overrides land in the derived config") {
  ConfigMap cfg = ConfigMap::parse_text(kSample);
  cfg.set("seed", "7");
  cfg.set("out", "/tmp/somewhere");
  cfg.set("format", "csv");
  const ExperimentConfig e = experiment_from_config(cfg);
  CHECK(e.master_seed == 7);
  CHECK(e.out_dir == "/tmp/somewhere");
  CHECK(e.report_format == "csv");
}
