#include "dpu/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "dpu/error.hpp"

namespace dpu {

namespace {

void require_same_length(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw ShapeError("metric inputs differ in length");
  if (a.size() < 2) throw ValidationError("metric inputs need at least 2 values");
}

}  // namespace

Real r2_score(const Vec& labels, const Vec& predictions) {
  require_same_length(labels, predictions);
  const Real mean = labels.mean();
  const Real ss_tot = (labels.array() - mean).square().sum();
  if (ss_tot <= 0) throw DegenerateError("r2_score: labels have zero variance");
  const Real ss_res = (labels - predictions).array().square().sum();
  return Real(1) - ss_res / ss_tot;
}

Real pearson_sq(const Vec& a, const Vec& b) {
  require_same_length(a, b);
  const Real ma = a.mean();
  const Real mb = b.mean();
  const Vec ca = a.array() - ma;
  const Vec cb = b.array() - mb;
  const Real va = ca.squaredNorm();
  const Real vb = cb.squaredNorm();
  if (va <= 0 || vb <= 0) throw DegenerateError("pearson_sq: zero variance input");
  const Real cov = ca.dot(cb);
  const Real r2 = (cov * cov) / (va * vb);
  return std::min(r2, Real(1));
}

Real accuracy(const std::vector<int>& labels, const std::vector<int>& predicted) {
  if (labels.size() != predicted.size() || labels.empty())
    throw ShapeError("accuracy: label/prediction size mismatch");
  size_t hits = 0;
  for (size_t i = 0; i < labels.size(); ++i) hits += labels[i] == predicted[i];
  return Real(hits) / Real(labels.size());
}

MatT<int64_t> confusion(const std::vector<int>& labels, const std::vector<int>& predicted,
                        int k) {
  if (labels.size() != predicted.size())
    throw ShapeError("confusion: label/prediction size mismatch");
  MatT<int64_t> m = MatT<int64_t>::Zero(k, k);
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k || predicted[i] < 0 || predicted[i] >= k)
      throw LabelError("confusion: class outside [0, " + std::to_string(k) + ")");
    m(labels[i], predicted[i]) += 1;
  }
  return m;
}

std::vector<Real> per_class_recall(const MatT<int64_t>& confusion) {
  std::vector<Real> recall(confusion.rows(), 0.0);
  for (Index r = 0; r < confusion.rows(); ++r) {
    const int64_t total = confusion.row(r).sum();
    recall[r] = total > 0 ? Real(confusion(r, r)) / Real(total) : Real(0);
  }
  return recall;
}

Real roc_auc(const std::vector<int>& binary_labels, const Vec& scores) {
  if (static_cast<Index>(binary_labels.size()) != scores.size())
    throw ShapeError("roc_auc: label/score size mismatch");
  const size_t n = binary_labels.size();
  int64_t pos = 0;
  for (int y : binary_labels) {
    if (y != 0 && y != 1) throw LabelError("roc_auc: labels must be 0/1");
    pos += y;
  }
  const int64_t neg = static_cast<int64_t>(n) - pos;
  if (pos == 0 || neg == 0) throw DegenerateError("roc_auc: both classes required");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(),
            [&scores](size_t a, size_t b) { return scores(a) < scores(b); });

  // Midranks over tied scores; AUC = (sum of positive ranks - pos*(pos+1)/2)
  // divided by pos*neg.
  Real pos_rank_sum = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores(order[j + 1]) == scores(order[i])) ++j;
    const Real midrank = Real(i + j) / 2 + 1;  // ranks are 1-based
    for (size_t t = i; t <= j; ++t)
      if (binary_labels[order[t]] == 1) pos_rank_sum += midrank;
    i = j + 1;
  }
  return (pos_rank_sum - Real(pos) * Real(pos + 1) / 2) / (Real(pos) * Real(neg));
}

std::pair<Real, Real> summary_stats(const Vec& values) {
  if (values.size() < 2) throw ValidationError("summary_stats needs at least 2 values");
  const Real mean = values.mean();
  const Real ss = (values.array() - mean).square().sum();
  return {mean, std::sqrt(ss / Real(values.size() - 1))};
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["metadata"] = metadata;
  nlohmann::ordered_json sc;
  for (const auto& [k, v] : scalars) sc[k] = v;
  j["scalars"] = sc;
  if (confusion) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (Index r = 0; r < confusion->rows(); ++r) {
      nlohmann::ordered_json row = nlohmann::ordered_json::array();
      for (Index c = 0; c < confusion->cols(); ++c) row.push_back((*confusion)(r, c));
      rows.push_back(row);
    }
    j["confusion"] = rows;
  }
  if (bucket_recall) j["bucket_recall"] = *bucket_recall;
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  MetricsReport report;
  const auto j = nlohmann::json::parse(text);
  if (j.contains("metadata"))
    for (const auto& [k, v] : j["metadata"].items()) report.metadata[k] = v.get<std::string>();
  if (j.contains("scalars"))
    for (const auto& [k, v] : j["scalars"].items()) report.scalars[k] = v.get<Real>();
  if (j.contains("confusion")) {
    const auto& rows = j["confusion"];
    const Index k = static_cast<Index>(rows.size());
    MatT<int64_t> m(k, k);
    for (Index r = 0; r < k; ++r)
      for (Index c = 0; c < k; ++c) m(r, c) = rows[r][c].get<int64_t>();
    report.confusion = m;
  }
  if (j.contains("bucket_recall"))
    report.bucket_recall = j["bucket_recall"].get<std::vector<Real>>();
  return report;
}

void write_confusion_csv(const std::string& path, const MatT<int64_t>& confusion) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (Index r = 0; r < confusion.rows(); ++r) {
    for (Index c = 0; c < confusion.cols(); ++c) {
      if (c) out << ',';
      out << confusion(r, c);
    }
    out << '\n';
  }
}

}  // namespace dpu
