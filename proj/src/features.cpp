#include "dpu/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dpu/error.hpp"

namespace dpu {

namespace {

constexpr Real kDegenerateSd = 1e-8;

std::vector<int> selected_widths(const NetworkSpec& net, const std::vector<int>& indices) {
  std::vector<int> widths;
  widths.reserve(indices.size());
  for (int i : indices) widths.push_back(net.layer_output_width(i));
  return widths;
}

}  // namespace

void validate(const FeatureSpec& fs, const NetworkSpec& net) {
  if (!fs.use_binary && !fs.use_values)
    throw ValidationError("feature spec must enable binary and/or value features");
  if (fs.layer_indices.empty()) throw ValidationError("feature spec selects no layers");
  const auto fcl = net.fcl_layer_indices();
  for (int idx : fs.layer_indices)
    if (std::find(fcl.begin(), fcl.end(), idx) == fcl.end())
      throw ValidationError("layer " + std::to_string(idx) +
                            " is not a post-ReLU fully-connected hidden layer");
}

Mat capture_activations(const NetworkSpec& spec, const NetworkState& state, const Mat& x,
                        const std::vector<int>& layer_indices) {
  const auto fcl = spec.fcl_layer_indices();
  for (int idx : layer_indices)
    if (std::find(fcl.begin(), fcl.end(), idx) == fcl.end())
      throw ValidationError("capture layer " + std::to_string(idx) +
                            " is not a post-ReLU fully-connected hidden layer");

  std::set<int> wanted(layer_indices.begin(), layer_indices.end());
  auto [preds, trace] = forward(spec, state, x, ForwardMode::eval(), wanted);

  Index total = 0;
  for (int idx : layer_indices) total += spec.layer_output_width(idx);
  Mat raw(x.rows(), total);
  Index off = 0;
  for (int idx : layer_indices) {
    const Mat& out = trace.outputs.at(idx);
    raw.middleCols(off, out.cols()) = out;
    off += out.cols();
  }
  return raw;
}

Mat binarize(const Mat& raw) {
  return (raw.array() > Real(0)).cast<Real>();
}

NormalizationStats fit_normalization(const Mat& raw_train) {
  if (raw_train.rows() < 2)
    throw ValidationError("normalization needs at least 2 training rows");
  NormalizationStats stats;
  const Index cols = raw_train.cols();
  stats.mean.resize(cols);
  stats.sd.resize(cols);
  stats.degenerate.resize(cols);
  for (Index c = 0; c < cols; ++c) {
    const Real mean = raw_train.col(c).mean();
    const Real ss = (raw_train.col(c).array() - mean).square().sum();
    const Real sd = std::sqrt(ss / Real(raw_train.rows() - 1));
    stats.mean(c) = mean;
    stats.sd(c) = sd;
    stats.degenerate[c] = sd < kDegenerateSd;
  }
  return stats;
}

Mat apply_normalization(const Mat& raw, const NormalizationStats& stats) {
  if (raw.cols() != stats.mean.size())
    throw ShapeError("normalization stats fit for " + std::to_string(stats.mean.size()) +
                     " columns, got " + std::to_string(raw.cols()));
  Mat out(raw.rows(), raw.cols());
  for (Index c = 0; c < raw.cols(); ++c) {
    if (stats.degenerate[c])
      out.col(c).setZero();
    else
      out.col(c) = (raw.col(c).array() - stats.mean(c)) / stats.sd(c);
  }
  return out;
}

FeatureMatrix build_features(const Mat& raw, const FeatureSpec& fs, const NetworkSpec& net,
                             const NormalizationStats* stats) {
  validate(fs, net);
  if (fs.use_values && stats == nullptr)
    throw ValidationError("value features need normalization stats");

  const auto widths = selected_widths(net, fs.layer_indices);
  Index total_width = 0;
  for (int w : widths) total_width += w;
  if (raw.cols() != total_width)
    throw ShapeError("raw activation width does not match the feature spec");

  const int blocks = (fs.use_binary ? 1 : 0) + (fs.use_values ? 1 : 0);
  FeatureMatrix fm;
  fm.values.resize(raw.rows(), total_width * blocks);
  fm.manifest.reserve(total_width * blocks);

  Index out_off = 0;
  auto append_block = [&](const Mat& block, const char* kind) {
    fm.values.middleCols(out_off, block.cols()) = block;
    Index col = 0;
    for (size_t li = 0; li < fs.layer_indices.size(); ++li) {
      for (int jn = 0; jn < widths[li]; ++jn, ++col) {
        char name[48];
        std::snprintf(name, sizeof(name), "layer%d_n%d_%s", fs.layer_indices[li], jn, kind);
        fm.manifest.emplace_back(name);
      }
    }
    out_off += block.cols();
  };

  if (fs.use_binary) append_block(binarize(raw), "bin");
  if (fs.use_values) append_block(apply_normalization(raw, *stats), "val");
  return fm;
}

void write_feature_csv(const std::string& path, const std::vector<int64_t>& example_ids,
                       const FeatureMatrix& features) {
  if (static_cast<Index>(example_ids.size()) != features.values.rows())
    throw ShapeError("write_feature_csv: id/row count mismatch");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "example_id";
  for (const auto& name : features.manifest) out << ',' << name;
  out << '\n';
  char buf[64];
  for (Index r = 0; r < features.values.rows(); ++r) {
    out << example_ids[r];
    for (Index c = 0; c < features.values.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.9g", features.values(r, c));
      out << ',' << buf;
    }
    out << '\n';
  }
}

void write_feature_manifest(const std::string& path, const FeatureMatrix& features) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& name : features.manifest) out << name << '\n';
}

FeatureCsv read_feature_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty feature CSV: " + path);

  FeatureCsv csv;
  {
    std::stringstream ss(line);
    std::string field;
    bool first = true;
    while (std::getline(ss, field, ',')) {
      if (first) {
        if (field != "example_id") throw FormatError("feature CSV must start with example_id");
        first = false;
      } else {
        csv.manifest.push_back(field);
      }
    }
  }

  std::vector<std::vector<Real>> rows;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<Real> row;
    bool first = true;
    while (std::getline(ss, field, ',')) {
      if (first) {
        csv.example_ids.push_back(std::stoll(field));
        first = false;
      } else {
        row.push_back(std::stod(field));
      }
    }
    if (row.size() != csv.manifest.size())
      throw FormatError(path + ": line " + std::to_string(lineno) + ": column count mismatch");
    rows.push_back(std::move(row));
  }

  csv.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(csv.manifest.size()));
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t c = 0; c < rows[r].size(); ++c)
      csv.values(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c];
  return csv;
}

void write_normalization_csv(const std::string& path, const NormalizationStats& stats) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "column,mean,sd,degenerate\n";
  char buf[96];
  for (Index c = 0; c < stats.mean.size(); ++c) {
    std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%d", static_cast<long long>(c),
                  stats.mean(c), stats.sd(c), stats.degenerate[c] ? 1 : 0);
    out << buf << '\n';
  }
}

NormalizationStats read_normalization_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "column,mean,sd,degenerate")
    throw FormatError("bad normalization CSV header in " + path);
  std::vector<Real> mean, sd;
  std::vector<bool> degenerate;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 4) throw FormatError("bad normalization CSV row in " + path);
    mean.push_back(std::stod(fields[1]));
    sd.push_back(std::stod(fields[2]));
    degenerate.push_back(fields[3] == "1");
  }
  NormalizationStats stats;
  stats.mean = Eigen::Map<Vec>(mean.data(), static_cast<Index>(mean.size()));
  stats.sd = Eigen::Map<Vec>(sd.data(), static_cast<Index>(sd.size()));
  stats.degenerate = degenerate;
  return stats;
}

}  // namespace dpu
