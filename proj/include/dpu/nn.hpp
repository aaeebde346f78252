#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dpu/rng.hpp"
#include "dpu/types.hpp"

namespace dpu {

enum class LayerKind { Dense, Relu, Dropout, BatchNorm, Embedding, Softmax, Sigmoid };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  int width = 0;             // dense output width / embedding dim
  double dropout_rate = 0.0;  // dropout only, in [0, 1)
  int vocab_size = 0;        // embedding only, >= 1

  static LayerSpec dense(int width) { return {LayerKind::Dense, width, 0.0, 0}; }
  static LayerSpec relu() { return {LayerKind::Relu, 0, 0.0, 0}; }
  static LayerSpec dropout(double rate) { return {LayerKind::Dropout, 0, rate, 0}; }
  static LayerSpec batch_norm() { return {LayerKind::BatchNorm, 0, 0.0, 0}; }
  static LayerSpec embedding(int vocab, int dim) { return {LayerKind::Embedding, dim, 0.0, vocab}; }
  static LayerSpec softmax() { return {LayerKind::Softmax, 0, 0.0, 0}; }
  static LayerSpec sigmoid() { return {LayerKind::Sigmoid, 0, 0.0, 0}; }

  bool operator==(const LayerSpec&) const = default;
};

// Architecture description. Embedding layers, when present, form a prefix:
// layer e consumes categorical column e of the input batch and emits a
// `width`-wide dense block. The first non-embedding layer sees
// [embedded blocks | numeric columns], where input_width counts the numeric
// columns only.
struct NetworkSpec {
  std::vector<LayerSpec> layers;
  int input_width = 0;  // numeric input columns
  Task task;

  int embedding_count() const;
  int batch_columns() const;  // embedding_count() + input_width
  int output_width() const;
  int layer_output_width(int layer_index) const;

  // Post-ReLU fully-connected capture points, in network order.
  std::vector<int> fcl_layer_indices() const;

  // Trainable parameter count (weights + biases + embeddings + bn scale/shift).
  int64_t parameter_count() const;

  bool operator==(const NetworkSpec&) const = default;
};

// Throws ValidationError when widths are inconsistent, dropout follows an
// embedding, rates are out of range, or the head does not match the task.
void validate(const NetworkSpec& spec);

// Per-layer tensors. Dense: w (in x out), b (1 x out). Embedding: w is the
// lookup table (vocab x dim). BatchNorm: w = scale, b = shift, plus running
// mean/variance. Adam first/second moments shadow every trainable tensor.
struct LayerState {
  Mat w, b;
  Mat running_mean, running_var;  // batch_norm only
  Mat m_w, v_w, m_b, v_b;         // adam moments
};

struct NetworkState {
  std::vector<LayerState> layers;
  uint64_t step = 0;   // adam steps taken
  uint64_t epoch = 0;  // current training epoch, drives lr decay
};

NetworkState init_state(const NetworkSpec& spec, uint64_t seed);

struct ForwardMode {
  enum class Kind { Train, Eval, McDropout };
  Kind kind = Kind::Eval;
  double mc_rate = 0.0;  // overrides every dropout layer's rate in McDropout
  uint64_t seed = 0;     // mask stream for Train / McDropout

  static ForwardMode eval() { return {Kind::Eval, 0.0, 0}; }
  static ForwardMode train(uint64_t seed) { return {Kind::Train, 0.0, seed}; }
  static ForwardMode mc_dropout(double rate, uint64_t draw_seed) {
    return {Kind::McDropout, rate, draw_seed};
  }
};

struct ForwardTrace {
  std::map<int, Mat> outputs;  // post-layer activations, keyed by layer index
  ForwardMode mode;
};

// Runs the network on a batch. Train mode uses batch statistics and updates
// the running stats in `state`; Eval and McDropout read running stats and
// leave state untouched. McDropout with rate 0 reduces to Eval.
std::pair<Mat, ForwardTrace> forward(const NetworkSpec& spec, NetworkState& state,
                                     const Mat& batch, const ForwardMode& mode,
                                     const std::set<int>& trace_layers = {});

// Inference-only convenience; rejects Train mode.
std::pair<Mat, ForwardTrace> forward(const NetworkSpec& spec, const NetworkState& state,
                                     const Mat& batch, const ForwardMode& mode,
                                     const std::set<int>& trace_layers = {});

enum class LossKind { Mse, SoftmaxCe, SigmoidBce };

std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

struct Gradients {
  std::vector<LayerState> layers;  // only w/b slots populated
};

// Mean loss over the batch plus exact analytic gradients for every trainable
// parameter. Forward runs in train mode; dropout masks are drawn from
// `dropout_seed` so the loss surface is deterministic and finite-difference
// checkable.
std::pair<Real, Gradients> loss_and_grad(const NetworkSpec& spec, NetworkState& state,
                                         const Mat& batch, const Mat& labels,
                                         LossKind loss, uint64_t dropout_seed);

// Loss value only, same forward path as loss_and_grad.
Real loss_value(const NetworkSpec& spec, NetworkState& state, const Mat& batch,
                const Mat& labels, LossKind loss, uint64_t dropout_seed);

struct TrainConfig {
  int epochs = 20;
  int batch_size = 128;
  Real learning_rate = 1e-3;
  std::vector<int> lr_decay_epochs;
  Real lr_decay_factor = 1.0;
  Real adam_beta1 = 0.9;
  Real adam_beta2 = 0.999;
  Real adam_epsilon = 1e-8;
  uint64_t seed = 0;
  LossKind loss = LossKind::Mse;
};

void validate(const TrainConfig& config);

// Effective learning rate for the state's current epoch: base rate times
// decay_factor once per decay epoch already reached.
Real effective_learning_rate(const TrainConfig& config, uint64_t epoch);

// Standard Adam with bias correction; increments the step counter.
void adam_step(NetworkState& state, const Gradients& grads, const TrainConfig& config);

struct TrainResult {
  NetworkState state;
  std::vector<Real> history;  // mean loss per epoch
};

// Full training loop: seeded init, per-epoch shuffle with seed
// mix(config.seed, epoch), minibatch Adam. Throws DivergenceError naming the
// epoch if the loss goes non-finite.
TrainResult train(const NetworkSpec& spec, const Mat& x, const Mat& y,
                  const TrainConfig& config);

namespace seed_stream {
inline constexpr uint64_t kInit = fnv1a64("nn.init");
inline constexpr uint64_t kBatchDropout = fnv1a64("nn.batch_dropout");
}  // namespace seed_stream

}  // namespace dpu
