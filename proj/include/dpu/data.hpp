#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dpu/types.hpp"

namespace dpu {

// Feature columns are laid out as [categorical index columns | numeric
// columns]; cat_vocab_sizes names the vocabulary of each categorical column
// in order. Indices are stored as reals (exact well past any desk-scale
// vocabulary).
struct Dataset {
  Mat x;
  Mat y;
  std::vector<int64_t> ids;
  std::vector<int> cat_vocab_sizes;
  Task task;

  Index size() const { return x.rows(); }
  int categorical_columns() const { return static_cast<int>(cat_vocab_sizes.size()); }
  int numeric_columns() const { return static_cast<int>(x.cols()) - categorical_columns(); }
};

Dataset subset(const Dataset& ds, const std::vector<int64_t>& ids);

// ---- IDX files (optionally gzip-compressed, detected by magic bytes) ----

struct IdxData {
  std::vector<uint32_t> dims;
  std::vector<uint8_t> data;  // row-major
};

IdxData load_idx(const std::string& path);
void write_idx(const std::string& path, const IdxData& idx);

// Images scaled to [0,1] and flattened; labels from a companion idx1 file.
Dataset idx_to_dataset(const IdxData& images, const IdxData& labels, int classes);

// ---- Ratings-style CSV with a declared schema ----

enum class ColumnRole { Numeric, Categorical, Label, Ignore };

struct CsvSchema {
  std::vector<std::pair<std::string, ColumnRole>> columns;  // in file order
  Task task;
};

// Schema file: one "column_name: numeric|categorical|label|ignore" line per
// column plus "task: regression|binary|multiclass" and optional "classes: K".
CsvSchema load_csv_schema(const std::string& path);

// First-seen categorical mapping with index 0 reserved for unknowns.
struct CategoryMap {
  std::vector<std::map<std::string, int>> per_column;  // one map per categorical column
  std::vector<int> vocab_sizes() const;
};

struct RatingCsv {
  Dataset dataset;
  CategoryMap categories;
};

// Builds the mapping while loading; with `existing`, applies it instead and
// sends unseen categories to index 0.
RatingCsv load_rating_csv(const std::string& path, const CsvSchema& schema,
                          const CategoryMap* existing = nullptr);

void write_category_map(const std::string& path, const CategoryMap& map);
CategoryMap read_category_map(const std::string& path);

// ---- Synthetic generators ----

struct NoiseProfile {
  double sigma_low = 0.05;  // regression noise sd where x0 < 0
  double sigma_high = 0.5;  // regression noise sd where x0 >= 0
  double blob_sd = 0.6;     // class blob spread (classification tasks)
  int classes = 5;          // multiclass blob count
};

// Regression: heteroscedastic y = f(x) + sigma(x) * noise over U(-1,1)^4
// inputs. Classification: Gaussian blobs on a circle with controllable
// overlap. Deterministic given seed; the x stream is independent of the
// noise stream so zero-noise runs share inputs with noisy ones.
Dataset gen_synthetic(TaskKind kind, Index n, uint64_t seed, const NoiseProfile& profile = {});

// Noiseless regression target, exposed for statistical oracles.
Real synthetic_regression_mean(const Vec& x);

// ---- Two-level split discipline ----

struct SplitPlan {
  uint64_t seed = 0;
  double train_fraction = 0.5;
  double test_fraction = 0.5;
  std::vector<int64_t> train_ids;      // D_train
  std::vector<int64_t> test_ids;       // D_test (= est_train + est_test)
  std::vector<int64_t> est_train_ids;  // D'_train
  std::vector<int64_t> est_test_ids;   // D'_test
};

// Seeded shuffle, contiguous cut, then D_test halved into D'_train/D'_test.
SplitPlan split(const Dataset& ds, uint64_t seed, double train_fraction,
                double test_fraction);

std::string split_plan_to_json(const SplitPlan& plan);

}  // namespace dpu
