#pragma once

#include <string>
#include <vector>

#include "dpu/nn.hpp"
#include "dpu/types.hpp"

namespace dpu {

// N stochastic predictions per example. draws[i] holds inference i's output
// for every example: one column for regression/binary (post-sigmoid
// probabilities for binary), K columns of post-softmax probabilities for
// multiclass.
struct PredictionSet {
  enum class Source { McDropout, Ensemble };
  std::vector<Mat> draws;
  Source source = Source::McDropout;
  double dropout_rate = 0.0;  // mc_dropout only
  uint64_t base_seed = 0;     // mc_dropout only
  int model_count = 0;        // ensemble only

  int n_inferences() const { return static_cast<int>(draws.size()); }
  Index examples() const { return draws.empty() ? 0 : draws.front().rows(); }
  Index prediction_width() const { return draws.empty() ? 0 : draws.front().cols(); }
};

// Keeps only the first n inferences; useful for inference-count studies.
PredictionSet truncate(const PredictionSet& preds, int n);

struct PuVector {
  enum class Formula { Std, Kl };
  Vec scores;
  Formula formula = Formula::Std;
};

std::string to_string(PuVector::Formula formula);

// Runs n dropout inferences on a frozen model; inference i uses draw seed
// mix(base_seed, i), so the result is independent of execution order.
PredictionSet mc_predict(const NetworkSpec& spec, const NetworkState& state, const Mat& x,
                         int n, double rate, uint64_t base_seed);

// Eval-mode prediction per independently trained model; feeds pu_std/pu_kl
// unchanged. All models must share one NetworkSpec.
PredictionSet ensemble_predict(const std::vector<std::pair<const NetworkSpec*, const NetworkState*>>& models,
                               const Mat& x);

// Bessel-corrected standard deviation across the N scalar predictions.
PuVector pu_std(const PredictionSet& preds);

// Sum over inferences of KL(p_i || mean p), natural log, 0 log 0 = 0, log
// arguments floored at 1e-12. Multiclass probability vectors only.
PuVector pu_kl(const PredictionSet& preds);

// Picks pu_std for scalar predictions and pu_kl for probability vectors.
PuVector pu_for_task(const PredictionSet& preds, const Task& task);

// CSV export: example_id,pu,formula,n_inferences,dropout_rate,source with PU
// at 9 significant digits.
void write_pu_csv(const std::string& path, const std::vector<int64_t>& example_ids,
                  const PuVector& pu, const PredictionSet& preds);

struct PuCsv {
  std::vector<int64_t> example_ids;
  Vec pu;
  std::string formula;
  int n_inferences = 0;
  double dropout_rate = 0.0;
  std::string source;
};

PuCsv read_pu_csv(const std::string& path);

}  // namespace dpu
