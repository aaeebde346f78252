#include "dpu/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>
#include <zlib.h>

#include "dpu/error.hpp"
#include "dpu/rng.hpp"

namespace dpu {

namespace {

constexpr uint8_t kIdxUbyteType = 0x08;

// Reads the whole file, inflating transparently when the gzip magic bytes
// are present. Offsets reported downstream refer to the decompressed stream.
std::vector<uint8_t> read_file_maybe_gz(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path);
  std::vector<uint8_t> data;
  uint8_t buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) data.insert(data.end(), buf, buf + n);
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw FormatError("gzip stream error in " + path);
  return data;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(trim(field));
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

double parse_number(const std::string& s, const std::string& context) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(context + ": cannot parse number '" + s + "'");
  }
}

}  // namespace

Dataset subset(const Dataset& ds, const std::vector<int64_t>& ids) {
  std::map<int64_t, Index> row_of;
  for (Index r = 0; r < ds.size(); ++r) row_of[ds.ids[r]] = r;
  Dataset out;
  out.cat_vocab_sizes = ds.cat_vocab_sizes;
  out.task = ds.task;
  out.x.resize(static_cast<Index>(ids.size()), ds.x.cols());
  out.y.resize(static_cast<Index>(ids.size()), ds.y.cols());
  out.ids = ids;
  for (size_t i = 0; i < ids.size(); ++i) {
    const auto it = row_of.find(ids[i]);
    if (it == row_of.end())
      throw ValidationError("subset: unknown example id " + std::to_string(ids[i]));
    out.x.row(static_cast<Index>(i)) = ds.x.row(it->second);
    out.y.row(static_cast<Index>(i)) = ds.y.row(it->second);
  }
  return out;
}

IdxData load_idx(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file_maybe_gz(path);
  if (bytes.size() < 4)
    throw FormatError(path + ": truncated IDX header at byte " + std::to_string(bytes.size()));
  if (bytes[0] != 0 || bytes[1] != 0)
    throw FormatError(path + ": bad IDX magic at byte 0");
  if (bytes[2] != kIdxUbyteType)
    throw FormatError(path + ": unsupported IDX type byte at byte 2 (only ubyte 0x08)");
  const int ndims = bytes[3];
  const size_t header = 4 + 4 * static_cast<size_t>(ndims);
  if (bytes.size() < header)
    throw FormatError(path + ": truncated dimension table at byte " +
                      std::to_string(bytes.size()));

  IdxData idx;
  size_t total = 1;
  for (int d = 0; d < ndims; ++d) {
    const size_t off = 4 + 4 * static_cast<size_t>(d);
    const uint32_t dim = (uint32_t(bytes[off]) << 24) | (uint32_t(bytes[off + 1]) << 16) |
                         (uint32_t(bytes[off + 2]) << 8) | uint32_t(bytes[off + 3]);
    idx.dims.push_back(dim);
    total *= dim;
  }
  if (bytes.size() < header + total)
    throw FormatError(path + ": payload truncated at byte " + std::to_string(bytes.size()) +
                      ", expected " + std::to_string(header + total));
  if (bytes.size() > header + total)
    throw FormatError(path + ": trailing bytes after payload at byte " +
                      std::to_string(header + total));
  idx.data.assign(bytes.begin() + static_cast<long>(header), bytes.end());
  return idx;
}

void write_idx(const std::string& path, const IdxData& idx) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const uint8_t head[4] = {0, 0, kIdxUbyteType, static_cast<uint8_t>(idx.dims.size())};
  out.write(reinterpret_cast<const char*>(head), 4);
  for (uint32_t dim : idx.dims) {
    const uint8_t be[4] = {static_cast<uint8_t>(dim >> 24), static_cast<uint8_t>(dim >> 16),
                           static_cast<uint8_t>(dim >> 8), static_cast<uint8_t>(dim)};
    out.write(reinterpret_cast<const char*>(be), 4);
  }
  out.write(reinterpret_cast<const char*>(idx.data.data()),
            static_cast<std::streamsize>(idx.data.size()));
  if (!out) throw IoError("write failed: " + path);
}

Dataset idx_to_dataset(const IdxData& images, const IdxData& labels, int classes) {
  if (images.dims.empty() || labels.dims.size() != 1)
    throw FormatError("idx_to_dataset: expected image tensor + label vector");
  const Index n = images.dims[0];
  if (static_cast<Index>(labels.dims[0]) != n)
    throw FormatError("idx_to_dataset: image/label counts differ");
  size_t per_example = 1;
  for (size_t d = 1; d < images.dims.size(); ++d) per_example *= images.dims[d];

  Dataset ds;
  ds.task = Task::multiclass(classes);
  ds.x.resize(n, static_cast<Index>(per_example));
  ds.y.resize(n, 1);
  ds.ids.resize(n);
  for (Index i = 0; i < n; ++i) {
    ds.ids[i] = i;
    for (size_t j = 0; j < per_example; ++j)
      ds.x(i, static_cast<Index>(j)) =
          Real(images.data[static_cast<size_t>(i) * per_example + j]) / Real(255);
    const int label = labels.data[i];
    if (label < 0 || label >= classes)
      throw LabelError("idx label " + std::to_string(label) + " outside [0, " +
                       std::to_string(classes) + ")");
    ds.y(i, 0) = label;
  }
  return ds;
}

CsvSchema load_csv_schema(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  CsvSchema schema;
  std::string task_name = "regression";
  int classes = 0;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos)
      throw FormatError(path + ": line " + std::to_string(lineno) + ": expected 'key: value'");
    const std::string key = trim(line.substr(0, colon));
    const std::string value = trim(line.substr(colon + 1));
    if (key == "task") {
      task_name = value;
    } else if (key == "classes") {
      classes = static_cast<int>(parse_number(value, path));
    } else if (value == "numeric") {
      schema.columns.emplace_back(key, ColumnRole::Numeric);
    } else if (value == "categorical") {
      schema.columns.emplace_back(key, ColumnRole::Categorical);
    } else if (value == "label") {
      schema.columns.emplace_back(key, ColumnRole::Label);
    } else if (value == "ignore") {
      schema.columns.emplace_back(key, ColumnRole::Ignore);
    } else {
      throw FormatError(path + ": line " + std::to_string(lineno) + ": unknown role '" +
                        value + "'");
    }
  }
  schema.task = task_from_string(task_name, classes);
  int labels = 0;
  for (const auto& [name, role] : schema.columns) labels += role == ColumnRole::Label;
  if (labels != 1) throw ValidationError(path + ": schema needs exactly one label column");
  return schema;
}

std::vector<int> CategoryMap::vocab_sizes() const {
  std::vector<int> sizes;
  sizes.reserve(per_column.size());
  for (const auto& m : per_column) {
    int max_index = 0;
    for (const auto& [k, v] : m) max_index = std::max(max_index, v);
    sizes.push_back(max_index + 1);  // index 0 reserved for unknowns
  }
  return sizes;
}

RatingCsv load_rating_csv(const std::string& path, const CsvSchema& schema,
                          const CategoryMap* existing) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty file");
  const auto header = split_csv_line(line);

  // Position of each schema column in the file.
  std::vector<int> file_pos;
  for (const auto& [name, role] : schema.columns) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end())
      throw FormatError(path + ": header is missing schema column '" + name + "'");
    file_pos.push_back(static_cast<int>(it - header.begin()));
  }

  std::vector<size_t> cat_cols, num_cols;
  size_t label_col = 0;
  for (size_t i = 0; i < schema.columns.size(); ++i) {
    switch (schema.columns[i].second) {
      case ColumnRole::Categorical: cat_cols.push_back(i); break;
      case ColumnRole::Numeric: num_cols.push_back(i); break;
      case ColumnRole::Label: label_col = i; break;
      case ColumnRole::Ignore: break;
    }
  }

  RatingCsv result;
  if (existing) {
    if (existing->per_column.size() != cat_cols.size())
      throw ValidationError("category map does not match the schema's categorical columns");
    result.categories = *existing;
  } else {
    result.categories.per_column.resize(cat_cols.size());
  }

  std::vector<std::vector<Real>> rows;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw FormatError(path + ": line " + std::to_string(lineno) + ": expected " +
                        std::to_string(header.size()) + " fields, got " +
                        std::to_string(fields.size()));
    std::vector<Real> row(cat_cols.size() + num_cols.size() + 1);
    const std::string ctx = path + ": line " + std::to_string(lineno);
    for (size_t c = 0; c < cat_cols.size(); ++c) {
      const std::string& value = fields[file_pos[cat_cols[c]]];
      auto& m = result.categories.per_column[c];
      const auto it = m.find(value);
      int index;
      if (it != m.end()) {
        index = it->second;
      } else if (existing) {
        index = 0;  // unknown category
      } else {
        index = static_cast<int>(m.size()) + 1;  // first-seen order, 0 reserved
        m.emplace(value, index);
      }
      row[c] = Real(index);
    }
    for (size_t c = 0; c < num_cols.size(); ++c)
      row[cat_cols.size() + c] = parse_number(fields[file_pos[num_cols[c]]], ctx);
    row.back() = parse_number(fields[file_pos[label_col]], ctx);
    rows.push_back(std::move(row));
  }

  Dataset& ds = result.dataset;
  ds.task = schema.task;
  ds.cat_vocab_sizes = result.categories.vocab_sizes();
  const Index n = static_cast<Index>(rows.size());
  ds.x.resize(n, static_cast<Index>(cat_cols.size() + num_cols.size()));
  ds.y.resize(n, 1);
  ds.ids.resize(n);
  for (Index r = 0; r < n; ++r) {
    ds.ids[r] = r;
    for (Index c = 0; c < ds.x.cols(); ++c) ds.x(r, c) = rows[r][c];
    ds.y(r, 0) = rows[r].back();
  }
  if (ds.task.kind == TaskKind::Multiclass) {
    for (Index r = 0; r < n; ++r) {
      const Real v = ds.y(r, 0);
      if (v != std::floor(v) || v < 0 || v >= ds.task.classes)
        throw LabelError(path + ": multiclass labels must be integers in [0, " +
                         std::to_string(ds.task.classes) + "); got " + std::to_string(v));
    }
  }
  return result;
}

void write_category_map(const std::string& path, const CategoryMap& map) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& m : map.per_column) {
    nlohmann::ordered_json col;
    for (const auto& [k, v] : m) col[k] = v;
    j.push_back(col);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

CategoryMap read_category_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j;
  in >> j;
  CategoryMap map;
  for (const auto& col : j) {
    std::map<std::string, int> m;
    for (const auto& [k, v] : col.items()) m[k] = v.get<int>();
    map.per_column.push_back(std::move(m));
  }
  return map;
}

Real synthetic_regression_mean(const Vec& x) {
  return Real(2) * std::sin(Real(2) * x(0)) + x(1) * x(2) + Real(0.5) * x(3) +
         x(4) * x(5) * x(6) + std::sin(Real(3) * x(7));
}

Dataset gen_synthetic(TaskKind kind, Index n, uint64_t seed, const NoiseProfile& profile) {
  if (n < 1) throw ValidationError("gen_synthetic needs n >= 1");
  Dataset ds;
  ds.ids.resize(n);
  std::iota(ds.ids.begin(), ds.ids.end(), int64_t(0));

  RngEngine x_eng = make_engine(mix_seed(seed, "synthetic.x"));
  RngEngine noise_eng = make_engine(mix_seed(seed, "synthetic.noise"));
  std::normal_distribution<Real> normal(0, 1);

  switch (kind) {
    case TaskKind::Regression: {
      ds.task = Task::regression();
      const int dim = 8;
      ds.x.resize(n, dim);
      ds.y.resize(n, 1);
      for (Index i = 0; i < n; ++i)
        for (int d = 0; d < dim; ++d) ds.x(i, d) = uniform_in(x_eng, -1, 1);
      for (Index i = 0; i < n; ++i) {
        const Vec xi = ds.x.row(i).transpose();
        const Real sd = ds.x(i, 0) < 0 ? profile.sigma_low : profile.sigma_high;
        const Real eps = normal(noise_eng);
        ds.y(i, 0) = synthetic_regression_mean(xi) + sd * eps;
      }
      break;
    }
    case TaskKind::Multiclass:
    case TaskKind::BinaryClassification: {
      const int k = kind == TaskKind::BinaryClassification ? 2 : profile.classes;
      if (k < 2) throw ValidationError("blob generator needs >= 2 classes");
      ds.task = kind == TaskKind::BinaryClassification ? Task::binary() : Task::multiclass(k);
      const Real radius = 2.0;
      ds.x.resize(n, 2);
      ds.y.resize(n, 1);
      for (Index i = 0; i < n; ++i) {
        const int cls = static_cast<int>(uniform01(x_eng) * k);
        const Real angle = Real(2) * Real(M_PI) * Real(cls) / Real(k);
        ds.y(i, 0) = cls;
        ds.x(i, 0) = radius * std::cos(angle) + profile.blob_sd * normal(noise_eng);
        ds.x(i, 1) = radius * std::sin(angle) + profile.blob_sd * normal(noise_eng);
      }
      break;
    }
  }
  return ds;
}

SplitPlan split(const Dataset& ds, uint64_t seed, double train_fraction,
                double test_fraction) {
  if (std::abs(train_fraction + test_fraction - 1.0) > 1e-9)
    throw ValidationError("split fractions must sum to 1");
  const Index n = ds.size();
  std::vector<int64_t> shuffled = ds.ids;
  RngEngine eng = make_engine(seed);
  std::shuffle(shuffled.begin(), shuffled.end(), eng);

  const auto n_train = static_cast<Index>(std::llround(Real(n) * train_fraction));
  const Index n_test = n - n_train;
  const Index n_est_train = n_test / 2;

  SplitPlan plan;
  plan.seed = seed;
  plan.train_fraction = train_fraction;
  plan.test_fraction = test_fraction;
  plan.train_ids.assign(shuffled.begin(), shuffled.begin() + n_train);
  plan.test_ids.assign(shuffled.begin() + n_train, shuffled.end());
  plan.est_train_ids.assign(plan.test_ids.begin(), plan.test_ids.begin() + n_est_train);
  plan.est_test_ids.assign(plan.test_ids.begin() + n_est_train, plan.test_ids.end());
  if (plan.train_ids.empty() || plan.est_train_ids.empty() || plan.est_test_ids.empty())
    throw ValidationError("split produced an empty set");
  return plan;
}

std::string split_plan_to_json(const SplitPlan& plan) {
  nlohmann::ordered_json j;
  j["seed"] = plan.seed;
  j["train_fraction"] = plan.train_fraction;
  j["test_fraction"] = plan.test_fraction;
  j["sizes"]["train"] = plan.train_ids.size();
  j["sizes"]["test"] = plan.test_ids.size();
  j["sizes"]["est_train"] = plan.est_train_ids.size();
  j["sizes"]["est_test"] = plan.est_test_ids.size();
  return j.dump(2);
}

}  // namespace dpu
