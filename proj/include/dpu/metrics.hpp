#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dpu/types.hpp"

namespace dpu {

// Coefficient of determination, 1 - SS_res/SS_tot. May be negative.
Real r2_score(const Vec& labels, const Vec& predictions);

// Squared Pearson correlation, in [0, 1]. Symmetric in its arguments.
Real pearson_sq(const Vec& a, const Vec& b);

Real accuracy(const std::vector<int>& labels, const std::vector<int>& predicted);

// confusion(row = label, col = prediction), k x k counts.
MatT<int64_t> confusion(const std::vector<int>& labels, const std::vector<int>& predicted,
                        int k);

std::vector<Real> per_class_recall(const MatT<int64_t>& confusion);

// Probability that a random positive outscores a random negative; ties count
// one half. Midrank formulation, O(n log n).
Real roc_auc(const std::vector<int>& binary_labels, const Vec& scores);

// Arithmetic mean and Bessel-corrected standard deviation.
std::pair<Real, Real> summary_stats(const Vec& values);

struct MetricsReport {
  std::map<std::string, Real> scalars;
  std::optional<MatT<int64_t>> confusion;
  std::optional<std::vector<Real>> bucket_recall;
  std::map<std::string, std::string> metadata;  // dataset, config hash, seed, ...

  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
};

void write_confusion_csv(const std::string& path, const MatT<int64_t>& confusion);

}  // namespace dpu
