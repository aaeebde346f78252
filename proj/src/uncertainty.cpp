#include "dpu/uncertainty.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dpu/error.hpp"

namespace dpu {

namespace {

constexpr Real kLogFloor = 1e-12;
constexpr Real kRowSumTolerance = 1e-4;

void require_predictions(const PredictionSet& preds) {
  if (preds.n_inferences() < 2)
    throw ValidationError("prediction set needs N >= 2 inferences");
  const Index rows = preds.draws.front().rows();
  const Index cols = preds.draws.front().cols();
  for (const Mat& d : preds.draws)
    if (d.rows() != rows || d.cols() != cols)
      throw ShapeError("inconsistent prediction shapes across inferences");
}

}  // namespace

std::string to_string(PuVector::Formula formula) {
  return formula == PuVector::Formula::Std ? "std" : "kl";
}

PredictionSet truncate(const PredictionSet& preds, int n) {
  if (n < 2 || n > preds.n_inferences())
    throw ValidationError("truncate: n must be in [2, N]");
  PredictionSet out = preds;
  out.draws.resize(n);
  return out;
}

PredictionSet mc_predict(const NetworkSpec& spec, const NetworkState& state, const Mat& x,
                         int n, double rate, uint64_t base_seed) {
  if (n < 2)
    throw ValidationError("mc_predict needs n >= 2 inferences (Bessel divides by N-1)");
  if (!(rate > 0.0 && rate < 1.0))
    throw InvalidRateError("mc_predict rate must be in (0, 1)");

  PredictionSet preds;
  preds.source = PredictionSet::Source::McDropout;
  preds.dropout_rate = rate;
  preds.base_seed = base_seed;
  preds.draws.reserve(n);
  for (int i = 0; i < n; ++i) {
    const uint64_t draw_seed = mix_seed(base_seed, static_cast<uint64_t>(i));
    auto [out, trace] = forward(spec, state, x, ForwardMode::mc_dropout(rate, draw_seed));
    preds.draws.push_back(std::move(out));
  }
  return preds;
}

PredictionSet ensemble_predict(
    const std::vector<std::pair<const NetworkSpec*, const NetworkState*>>& models,
    const Mat& x) {
  if (models.size() < 2) throw ValidationError("ensemble needs >= 2 models");
  for (const auto& [spec, state] : models)
    if (!(*spec == *models.front().first))
      throw ValidationError("ensemble models must share one NetworkSpec");

  PredictionSet preds;
  preds.source = PredictionSet::Source::Ensemble;
  preds.model_count = static_cast<int>(models.size());
  preds.draws.reserve(models.size());
  for (const auto& [spec, state] : models) {
    auto [out, trace] = forward(*spec, *state, x, ForwardMode::eval());
    preds.draws.push_back(std::move(out));
  }
  return preds;
}

PuVector pu_std(const PredictionSet& preds) {
  require_predictions(preds);
  if (preds.prediction_width() != 1)
    throw ValidationError("pu_std expects scalar predictions; use pu_kl for distributions");
  const int n = preds.n_inferences();
  const Index rows = preds.examples();

  Vec mean = Vec::Zero(rows);
  for (const Mat& d : preds.draws) mean += d.col(0);
  mean /= Real(n);

  Vec ss = Vec::Zero(rows);
  for (const Mat& d : preds.draws) ss += (d.col(0) - mean).array().square().matrix();

  PuVector pu;
  pu.formula = PuVector::Formula::Std;
  pu.scores = (ss / Real(n - 1)).array().sqrt();
  return pu;
}

PuVector pu_kl(const PredictionSet& preds) {
  require_predictions(preds);
  const int n = preds.n_inferences();
  const Index rows = preds.examples();
  const Index k = preds.prediction_width();
  if (k < 2) throw ValidationError("pu_kl expects probability vectors; use pu_std for scalars");

  for (const Mat& d : preds.draws) {
    for (Index r = 0; r < rows; ++r) {
      if (d.row(r).minCoeff() < 0 || std::abs(d.row(r).sum() - Real(1)) > kRowSumTolerance)
        throw ValidationError("pu_kl: prediction rows must be probability distributions");
    }
  }

  Mat mean = Mat::Zero(rows, k);
  for (const Mat& d : preds.draws) mean += d;
  mean /= Real(n);

  PuVector pu;
  pu.formula = PuVector::Formula::Kl;
  pu.scores = Vec::Zero(rows);
  for (const Mat& d : preds.draws) {
    for (Index r = 0; r < rows; ++r) {
      Real kl = 0;
      for (Index c = 0; c < k; ++c) {
        const Real p = d(r, c);
        if (p <= 0) continue;  // 0 log(0/q) contributes nothing
        kl += p * std::log(std::max(p, kLogFloor) / std::max(mean(r, c), kLogFloor));
      }
      pu.scores(r) += kl;
    }
  }
  // KL is nonnegative analytically; clamp away float residue near zero.
  pu.scores = pu.scores.cwiseMax(Real(0));
  return pu;
}

PuVector pu_for_task(const PredictionSet& preds, const Task& task) {
  return task.kind == TaskKind::Multiclass ? pu_kl(preds) : pu_std(preds);
}

void write_pu_csv(const std::string& path, const std::vector<int64_t>& example_ids,
                  const PuVector& pu, const PredictionSet& preds) {
  if (static_cast<Index>(example_ids.size()) != pu.scores.size())
    throw ShapeError("write_pu_csv: id/score count mismatch");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "example_id,pu,formula,n_inferences,dropout_rate,source\n";
  const std::string source =
      preds.source == PredictionSet::Source::McDropout ? "mc_dropout" : "ensemble";
  const std::string formula = to_string(pu.formula);
  char buf[64];
  for (Index i = 0; i < pu.scores.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.9g", pu.scores(i));
    out << example_ids[i] << ',' << buf << ',' << formula << ',' << preds.n_inferences()
        << ',' << preds.dropout_rate << ',' << source << '\n';
  }
}

PuCsv read_pu_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) ||
      line != "example_id,pu,formula,n_inferences,dropout_rate,source")
    throw FormatError("bad PU CSV header in " + path);

  PuCsv csv;
  std::vector<Real> scores;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 6)
      throw FormatError(path + ": line " + std::to_string(lineno) + ": expected 6 fields");
    csv.example_ids.push_back(std::stoll(fields[0]));
    scores.push_back(std::stod(fields[1]));
    csv.formula = fields[2];
    csv.n_inferences = std::stoi(fields[3]);
    csv.dropout_rate = std::stod(fields[4]);
    csv.source = fields[5];
  }
  csv.pu = Eigen::Map<Vec>(scores.data(), static_cast<Index>(scores.size()));
  return csv;
}

}  // namespace dpu
