#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "dpu/data.hpp"
#include "dpu/error.hpp"
#include "dpu/uncertainty.hpp"
#include "test_util.hpp"

using namespace dpu;

namespace {

PredictionSet scalar_set(const std::vector<std::vector<Real>>& per_example_preds) {
  // per_example_preds[e][i]: prediction i of example e
  PredictionSet set;
  const int n = static_cast<int>(per_example_preds.front().size());
  const auto rows = static_cast<Index>(per_example_preds.size());
  for (int i = 0; i < n; ++i) {
    Mat draw(rows, 1);
    for (Index e = 0; e < rows; ++e) draw(e, 0) = per_example_preds[e][i];
    set.draws.push_back(draw);
  }
  return set;
}

// Independent two-pass oracle for Eq-1-style dispersion.
Real std_oracle(const std::vector<Real>& preds) {
  Real mean = 0;
  for (Real p : preds) mean += p;
  mean /= Real(preds.size());
  Real ss = 0;
  for (Real p : preds) ss += (p - mean) * (p - mean);
  return std::sqrt(ss / Real(preds.size() - 1));
}

// Independent direct-summation oracle for the KL-to-mean dispersion.
Real kl_oracle(const std::vector<std::vector<Real>>& dists) {
  const size_t k = dists.front().size();
  std::vector<Real> mean(k, 0);
  for (const auto& d : dists)
    for (size_t c = 0; c < k; ++c) mean[c] += d[c];
  for (size_t c = 0; c < k; ++c) mean[c] /= Real(dists.size());
  Real total = 0;
  for (const auto& d : dists)
    for (size_t c = 0; c < k; ++c)
      if (d[c] > 0)
        total += d[c] * std::log(std::max(d[c], 1e-12) / std::max(mean[c], 1e-12));
  return total;
}

PredictionSet random_distribution_set(RngEngine& eng, Index examples, int n, int k) {
  PredictionSet set;
  for (int i = 0; i < n; ++i) {
    Mat draw(examples, k);
    for (Index e = 0; e < examples; ++e) {
      Real total = 0;
      for (int c = 0; c < k; ++c) {
        draw(e, c) = uniform01(eng) + 1e-3;
        total += draw(e, c);
      }
      draw.row(e) /= total;
    }
    set.draws.push_back(draw);
  }
  return set;
}

NetworkSpec small_dropout_net() {
  NetworkSpec spec;
  spec.input_width = 3;
  spec.task = Task::regression();
  spec.layers = {LayerSpec::dense(8), LayerSpec::relu(), LayerSpec::dropout(0.2),
                 LayerSpec::dense(1)};
  return spec;
}

}  // namespace

TEST_CASE("pu_std hand-evaluated cases") {
  CHECK(pu_std(scalar_set({{0.5, 0.5, 0.5}})).scores(0) == doctest::Approx(0.0));
  // mean 1, sum of squares 2, /(N-1)=1, sqrt -> 1
  CHECK(pu_std(scalar_set({{0.0, 1.0, 2.0}})).scores(0) == doctest::Approx(1.0));
}

TEST_CASE("pu_std matches the two-pass oracle on random sets") {
  RngEngine eng = make_engine(42);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + static_cast<int>(eng() % 12);
    std::vector<Real> preds(n);
    for (Real& p : preds) p = uniform_in(eng, -3, 3);
    const Real got = pu_std(scalar_set({preds})).scores(0);
    CHECK(got == doctest::Approx(std_oracle(preds)).epsilon(1e-9));
  }
}

TEST_CASE("pu_std rejects vector predictions and tiny N") {
  RngEngine eng = make_engine(1);
  auto set = random_distribution_set(eng, 3, 4, 3);
  CHECK_THROWS_AS(pu_std(set), ValidationError);
  PredictionSet one;
  one.draws.push_back(Mat::Ones(2, 1));
  CHECK_THROWS_AS(pu_std(one), ValidationError);
}

TEST_CASE("pu_kl hand-evaluated cases") {
  PredictionSet identical;
  Mat d(1, 3);
  d << 0.2, 0.3, 0.5;
  identical.draws = {d, d, d, d};
  CHECK(pu_kl(identical).scores(0) == doctest::Approx(0.0));

  PredictionSet disjoint;
  Mat a(1, 2), b(1, 2);
  a << 1, 0;
  b << 0, 1;
  disjoint.draws = {a, b};
  // mean (0.5, 0.5); each KL = 1*log(1/0.5) = ln 2; sum = 2 ln 2
  CHECK(pu_kl(disjoint).scores(0) == doctest::Approx(2 * std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("pu_kl matches the direct-summation oracle on random sets") {
  RngEngine eng = make_engine(43);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + static_cast<int>(eng() % 8);
    const int k = 2 + static_cast<int>(eng() % 4);
    auto set = random_distribution_set(eng, 1, n, k);
    std::vector<std::vector<Real>> dists;
    for (const Mat& draw : set.draws) {
      std::vector<Real> d(k);
      for (int c = 0; c < k; ++c) d[c] = draw(0, c);
      dists.push_back(d);
    }
    CHECK(pu_kl(set).scores(0) == doctest::Approx(kl_oracle(dists)).epsilon(1e-9));
  }
}

TEST_CASE("pu_kl rejects malformed distributions") {
  PredictionSet set;
  Mat bad(1, 2);
  bad << 0.9, 0.3;  // sums to 1.2
  set.draws = {bad, bad};
  CHECK_THROWS_AS(pu_kl(set), ValidationError);
}

TEST_CASE("pu nonnegativity and zero-iff-identical") {
  RngEngine eng = make_engine(44);
  for (int trial = 0; trial < 50; ++trial) {
    auto set = random_distribution_set(eng, 4, 6, 3);
    const Vec kl = pu_kl(set).scores;
    CHECK(kl.minCoeff() >= 0.0);
    CHECK(kl.minCoeff() > 0.0);  // random draws almost surely differ
  }
  PredictionSet same;
  Mat d = Mat::Constant(3, 1, 0.7);
  same.draws = {d, d, d};
  CHECK(pu_std(same).scores.maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("pu formulas are invariant to prediction order") {
  RngEngine eng = make_engine(45);
  std::vector<Real> preds = {0.1, 0.7, 0.3, 0.9, 0.2};
  const Real base = pu_std(scalar_set({preds})).scores(0);
  std::sort(preds.begin(), preds.end());
  CHECK(pu_std(scalar_set({preds})).scores(0) == doctest::Approx(base).epsilon(1e-12));

  auto set = random_distribution_set(eng, 2, 5, 3);
  const Vec before = pu_kl(set).scores;
  std::reverse(set.draws.begin(), set.draws.end());
  const Vec after = pu_kl(set).scores;
  CHECK((before - after).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("pu_std scales linearly with the predictions") {
  std::vector<Real> preds = {0.4, 1.1, -0.3, 0.8};
  const Real base = pu_std(scalar_set({preds})).scores(0);
  for (Real& p : preds) p *= 3.5;
  CHECK(pu_std(scalar_set({preds})).scores(0) == doctest::Approx(3.5 * base).epsilon(1e-12));
}

TEST_CASE("mc_predict is deterministic and near-eval at vanishing rates") {
  NetworkSpec spec = small_dropout_net();
  NetworkState state = init_state(spec, 77);
  RngEngine eng = make_engine(9);
  const Mat x = testing::random_matrix(eng, 20, 3);

  auto a = mc_predict(spec, state, x, 5, 1e-9, 1234);
  auto b = mc_predict(spec, state, x, 5, 1e-9, 1234);
  for (int i = 0; i < 5; ++i) CHECK(a.draws[i] == b.draws[i]);

  auto [eval_out, trace] = forward(spec, state, x, ForwardMode::eval());
  for (const Mat& draw : a.draws)
    CHECK((draw - eval_out).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("a trained model disperses more at a higher inference rate") {
  const Dataset ds = gen_synthetic(TaskKind::Regression, 800, 3);
  NetworkSpec spec;
  spec.input_width = static_cast<int>(ds.x.cols());
  spec.task = Task::regression();
  spec.layers = {LayerSpec::dense(16), LayerSpec::relu(), LayerSpec::dropout(0.1),
                 LayerSpec::dense(8), LayerSpec::relu(), LayerSpec::dropout(0.1),
                 LayerSpec::dense(1)};
  TrainConfig tc;
  tc.epochs = 8;
  tc.batch_size = 64;
  tc.learning_rate = 3e-3;
  tc.seed = 4;
  const auto trained = train(spec, ds.x, ds.y, tc);
  const Vec pu_low = pu_std(mc_predict(spec, trained.state, ds.x, 60, 0.1, 5)).scores;
  const Vec pu_high = pu_std(mc_predict(spec, trained.state, ds.x, 60, 0.3, 5)).scores;
  CHECK(pu_high.mean() > pu_low.mean());
}

TEST_CASE("mc_predict validates its inputs") {
  NetworkSpec spec = small_dropout_net();
  NetworkState state = init_state(spec, 1);
  const Mat x = Mat::Ones(2, 3);
  CHECK_THROWS_AS(mc_predict(spec, state, x, 1, 0.1, 0), ValidationError);
  CHECK_THROWS_AS(mc_predict(spec, state, x, 5, 0.0, 0), InvalidRateError);
  CHECK_THROWS_AS(mc_predict(spec, state, x, 5, 1.0, 0), InvalidRateError);
}

TEST_CASE("truncate keeps a prefix of the draws") {
  NetworkSpec spec = small_dropout_net();
  NetworkState state = init_state(spec, 3);
  RngEngine eng = make_engine(10);
  const Mat x = testing::random_matrix(eng, 5, 3);
  auto full = mc_predict(spec, state, x, 10, 0.3, 9);
  auto head = truncate(full, 4);
  CHECK(head.n_inferences() == 4);
  for (int i = 0; i < 4; ++i) CHECK(head.draws[i] == full.draws[i]);
  CHECK_THROWS_AS(truncate(full, 1), ValidationError);
}

TEST_CASE("ensemble of identical models has zero PU") {
  NetworkSpec spec = small_dropout_net();
  NetworkState state = init_state(spec, 5);
  RngEngine eng = make_engine(11);
  const Mat x = testing::random_matrix(eng, 10, 3);
  auto preds = ensemble_predict({{&spec, &state}, {&spec, &state}}, x);
  CHECK(preds.source == PredictionSet::Source::Ensemble);
  CHECK(pu_std(preds).scores.maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("independently initialized ensembles disagree") {
  NetworkSpec spec = small_dropout_net();
  std::vector<NetworkState> states;
  for (uint64_t s = 0; s < 4; ++s) states.push_back(init_state(spec, 100 + s));
  std::vector<std::pair<const NetworkSpec*, const NetworkState*>> models;
  for (const auto& st : states) models.emplace_back(&spec, &st);
  RngEngine eng = make_engine(12);
  const Mat x = testing::random_matrix(eng, 50, 3);
  const Vec pu = pu_std(ensemble_predict(models, x)).scores;
  CHECK(pu.mean() > 0.0);
}

TEST_CASE("pu formulas ignore the prediction source") {
  NetworkSpec spec = small_dropout_net();
  NetworkState state = init_state(spec, 6);
  RngEngine eng = make_engine(13);
  const Mat x = testing::random_matrix(eng, 8, 3);
  auto mc = mc_predict(spec, state, x, 4, 0.3, 21);
  PredictionSet as_ensemble = mc;
  as_ensemble.source = PredictionSet::Source::Ensemble;
  as_ensemble.model_count = 4;
  CHECK(pu_std(mc).scores == pu_std(as_ensemble).scores);
}

TEST_CASE("ensemble rejects mismatched specs") {
  NetworkSpec a = small_dropout_net();
  NetworkSpec b = small_dropout_net();
  b.layers[0].width = 9;
  NetworkState sa = init_state(a, 1);
  NetworkState sb = init_state(b, 2);
  const Mat x = Mat::Ones(2, 3);
  CHECK_THROWS_AS(ensemble_predict({{&a, &sa}, {&b, &sb}}, x), ValidationError);
}

TEST_CASE("pu csv round-trips at printed precision") {
  RngEngine eng = make_engine(14);
  std::vector<std::vector<Real>> rows;
  std::vector<int64_t> ids;
  for (int e = 0; e < 25; ++e) {
    rows.push_back({uniform01(eng), uniform01(eng), uniform01(eng)});
    ids.push_back(e * 3 + 1);
  }
  auto set = scalar_set(rows);
  set.dropout_rate = 0.25;
  const PuVector pu = pu_std(set);

  const auto path = std::filesystem::temp_directory_path() / "dpu_test_pu.csv";
  write_pu_csv(path.string(), ids, pu, set);
  const PuCsv back = read_pu_csv(path.string());
  REQUIRE(back.example_ids == ids);
  CHECK(back.formula == "std");
  CHECK(back.n_inferences == 3);
  CHECK(back.dropout_rate == doctest::Approx(0.25));
  for (Index i = 0; i < pu.scores.size(); ++i) {
    char printed[64];
    std::snprintf(printed, sizeof(printed), "%.9g", pu.scores(i));
    CHECK(back.pu(i) == doctest::Approx(std::stod(printed)).epsilon(1e-12));
  }
  std::filesystem::remove(path);
}
