#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dpu/error.hpp"
#include "dpu/metrics.hpp"
#include "dpu/rng.hpp"

using namespace dpu;

namespace {

Vec vec(std::initializer_list<Real> values) {
  Vec v(static_cast<Index>(values.size()));
  Index i = 0;
  for (Real x : values) v(i++) = x;
  return v;
}

Vec random_vec(RngEngine& eng, Index n, Real lo = -1, Real hi = 1) {
  Vec v(n);
  for (Index i = 0; i < n; ++i) v(i) = uniform_in(eng, lo, hi);
  return v;
}

// Covariance-formula oracle for the squared correlation.
Real pearson_sq_oracle(const Vec& a, const Vec& b) {
  const Index n = a.size();
  Real sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  for (Index i = 0; i < n; ++i) {
    sa += a(i);
    sb += b(i);
    sab += a(i) * b(i);
    saa += a(i) * a(i);
    sbb += b(i) * b(i);
  }
  const Real cov = sab / n - (sa / n) * (sb / n);
  const Real va = saa / n - (sa / n) * (sa / n);
  const Real vb = sbb / n - (sb / n) * (sb / n);
  return cov * cov / (va * vb);
}

// O(n^2) pairwise comparison oracle for AUC with half-credit ties.
Real auc_oracle(const std::vector<int>& labels, const Vec& scores) {
  Real wins = 0;
  int64_t pairs = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 1) continue;
    for (size_t j = 0; j < labels.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores(i) > scores(j)) wins += 1;
      else if (scores(i) == scores(j)) wins += 0.5;
    }
  }
  return wins / Real(pairs);
}

}  // namespace

TEST_CASE("r2 hand-evaluated cases") {
  const Vec labels = vec({1, 2, 3});
  CHECK(r2_score(labels, labels) == doctest::Approx(1.0));
  CHECK(r2_score(labels, vec({2, 2, 2})) == doctest::Approx(0.0));
  // SS_res = 1, SS_tot = 2
  CHECK(r2_score(labels, vec({1, 2, 4})) == doctest::Approx(0.5));
  CHECK_THROWS_AS(r2_score(vec({2, 2, 2}), labels), DegenerateError);
}

TEST_CASE("r2 of any non-constant vector with itself is 1") {
  RngEngine eng = make_engine(1);
  for (int t = 0; t < 20; ++t) {
    const Vec x = random_vec(eng, 50);
    CHECK(r2_score(x, x) == doctest::Approx(1.0));
  }
}

TEST_CASE("pearson_sq hand cases and affine invariance") {
  const Vec a = vec({1, 2, 3});
  CHECK(pearson_sq(a, vec({5, 7, 9})) == doctest::Approx(1.0));   // b = 2a + 3
  CHECK(pearson_sq(a, vec({3, 2, 1})) == doctest::Approx(1.0));   // anti-correlation
  CHECK_THROWS_AS(pearson_sq(a, vec({4, 4, 4})), DegenerateError);

  RngEngine eng = make_engine(2);
  const Vec x = random_vec(eng, 40);
  const Vec y = random_vec(eng, 40);
  const Real base = pearson_sq(x, y);
  const Vec y2 = (-2.5 * y.array() + 7).matrix();
  CHECK(pearson_sq(x, y2) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("pearson_sq of a vector with itself is 1") {
  RngEngine eng = make_engine(12);
  const Vec x = random_vec(eng, 64);
  CHECK(pearson_sq(x, x) == doctest::Approx(1.0));
}

TEST_CASE("pearson_sq matches the covariance oracle") {
  RngEngine eng = make_engine(3);
  for (int t = 0; t < 1000; ++t) {
    const Index n = 3 + static_cast<Index>(eng() % 30);
    const Vec a = random_vec(eng, n);
    Vec b = random_vec(eng, n);
    b += 0.5 * a;  // some correlation
    CHECK(pearson_sq(a, b) == doctest::Approx(pearson_sq_oracle(a, b)).epsilon(1e-10));
  }
}

TEST_CASE("accuracy and confusion basics") {
  CHECK(accuracy({0, 1, 2}, {0, 1, 2}) == doctest::Approx(1.0));
  CHECK(accuracy({0, 1}, {1, 0}) == doctest::Approx(0.0));

  const auto m = confusion({0, 1}, {1, 0}, 2);
  CHECK(m(0, 1) == 1);
  CHECK(m(1, 0) == 1);
  CHECK(m(0, 0) == 0);
  CHECK_THROWS_AS(confusion({0, 5}, {0, 0}, 2), LabelError);
}

TEST_CASE("confusion row sums equal per-class label counts") {
  RngEngine eng = make_engine(4);
  const int k = 4;
  std::vector<int> labels, preds;
  std::vector<int64_t> counts(k, 0);
  for (int i = 0; i < 500; ++i) {
    labels.push_back(static_cast<int>(eng() % k));
    preds.push_back(static_cast<int>(eng() % k));
    counts[labels.back()] += 1;
  }
  const auto m = confusion(labels, preds, k);
  CHECK(m.sum() == 500);
  for (int r = 0; r < k; ++r) CHECK(m.row(r).sum() == counts[r]);
  CHECK(accuracy(labels, preds) == doctest::Approx(Real(m.trace()) / 500));
}

TEST_CASE("random 5-class assignment sits at chance level") {
  RngEngine eng = make_engine(5);
  const int n = 100000;
  std::vector<int> labels(n), preds(n);
  for (int i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(eng() % 5);
    preds[i] = static_cast<int>(eng() % 5);
  }
  const Real acc = accuracy(labels, preds);
  CHECK(acc > 0.19);
  CHECK(acc < 0.21);
}

TEST_CASE("roc_auc hand cases") {
  CHECK(roc_auc({0, 1}, vec({0.1, 0.9})) == doctest::Approx(1.0));
  CHECK(roc_auc({0, 1, 0, 1}, vec({0.5, 0.5, 0.5, 0.5})) == doctest::Approx(0.5));
  CHECK(roc_auc({1, 0}, vec({0.1, 0.9})) == doctest::Approx(0.0));
  CHECK_THROWS_AS(roc_auc({1, 1}, vec({0.1, 0.9})), DegenerateError);
}

TEST_CASE("roc_auc matches the pairwise oracle, ties included") {
  RngEngine eng = make_engine(6);
  for (int t = 0; t < 50; ++t) {
    const int n = 200;
    std::vector<int> labels(n);
    Vec scores(n);
    for (int i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(eng() % 2);
      // Quantized scores force plenty of ties.
      scores(i) = std::floor(uniform01(eng) * 20) / 20 + 0.1 * labels[i];
    }
    bool has_both = false;
    for (int i = 1; i < n; ++i) has_both |= labels[i] != labels[0];
    if (!has_both) continue;
    CHECK(roc_auc(labels, scores) ==
          doctest::Approx(auc_oracle(labels, scores)).epsilon(1e-10));
  }
}

TEST_CASE("roc_auc is invariant under increasing transforms") {
  RngEngine eng = make_engine(7);
  const int n = 150;
  std::vector<int> labels(n);
  Vec scores(n);
  for (int i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(eng() % 2);
    scores(i) = uniform_in(eng, -2, 2) + labels[i];
  }
  const Real base = roc_auc(labels, scores);
  const Vec warped = scores.unaryExpr([](Real s) { return std::exp(0.7 * s) + 3; });
  CHECK(roc_auc(labels, warped) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("summary_stats hand cases and oracle") {
  auto [m0, s0] = summary_stats(vec({0, 0, 0}));
  CHECK(m0 == doctest::Approx(0.0));
  CHECK(s0 == doctest::Approx(0.0));
  auto [m1, s1] = summary_stats(vec({0, 1, 2}));
  CHECK(m1 == doctest::Approx(1.0));
  CHECK(s1 == doctest::Approx(1.0));

  RngEngine eng = make_engine(8);
  for (int t = 0; t < 100; ++t) {
    const Vec v = random_vec(eng, 30, -5, 5);
    Real mean = 0;
    for (Index i = 0; i < v.size(); ++i) mean += v(i);
    mean /= Real(v.size());
    Real ss = 0;
    for (Index i = 0; i < v.size(); ++i) ss += (v(i) - mean) * (v(i) - mean);
    const Real sd = std::sqrt(ss / Real(v.size() - 1));
    auto [m, s] = summary_stats(v);
    CHECK(m == doctest::Approx(mean).epsilon(1e-9));
    CHECK(s == doctest::Approx(sd).epsilon(1e-9));
  }
}

TEST_CASE("metrics report serializes to json and back") {
  MetricsReport report;
  report.scalars["estimator_r2"] = 0.731;
  report.scalars["dropout_rate"] = 0.1;
  report.metadata["dataset"] = "synthetic_hetero";
  report.metadata["seed"] = "42";
  MatT<int64_t> conf(2, 2);
  conf << 8, 2, 1, 9;
  report.confusion = conf;
  report.bucket_recall = std::vector<Real>{0.8, 0.9};

  const auto back = MetricsReport::from_json(report.to_json());
  CHECK(back.scalars.at("estimator_r2") == doctest::Approx(0.731));
  CHECK(back.metadata.at("dataset") == "synthetic_hetero");
  REQUIRE(back.confusion.has_value());
  CHECK((*back.confusion)(1, 1) == 9);
  CHECK(back.bucket_recall->at(1) == doctest::Approx(0.9));
}

TEST_CASE("per-class recall") {
  MatT<int64_t> conf(3, 3);
  conf << 8, 1, 1, 0, 5, 5, 2, 0, 8;
  const auto recall = per_class_recall(conf);
  CHECK(recall[0] == doctest::Approx(0.8));
  CHECK(recall[1] == doctest::Approx(0.5));
  CHECK(recall[2] == doctest::Approx(0.8));
}
