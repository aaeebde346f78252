#include "dpu/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dpu/error.hpp"

namespace dpu {

namespace {

constexpr Real kBnEpsilon = 1e-5;
constexpr Real kBnMomentum = 0.1;  // running = (1-m)*running + m*batch
constexpr Real kLogFloor = 1e-12;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError(msg);
}

void assert_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw Error(std::string(what) + ": non-finite values");
}

Mat softmax_rows(const Mat& z) {
  Mat p(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const Real zmax = z.row(r).maxCoeff();
    p.row(r) = (z.row(r).array() - zmax).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

Mat sigmoid(const Mat& z) {
  return z.unaryExpr([](Real v) { return Real(1) / (Real(1) + std::exp(-v)); });
}

// Bernoulli keep-mask pre-scaled by 1/(1-rate); row-major draw order.
Mat dropout_mask(Index rows, Index cols, double rate, RngEngine& eng) {
  const Real scale = Real(1) / (Real(1) - rate);
  Mat mask(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) mask(r, c) = uniform01(eng) < rate ? Real(0) : scale;
  return mask;
}

int embedding_column_offset(const NetworkSpec& spec, int emb_index) {
  int off = 0;
  for (int e = 0; e < emb_index; ++e) off += spec.layers[e].width;
  return off;
}

// Gathers embedded blocks and numeric passthrough columns into one matrix.
Mat compose_input(const NetworkSpec& spec, const NetworkState& state, const Mat& batch) {
  const int emb = spec.embedding_count();
  if (emb == 0) return batch;
  int total = spec.input_width;
  for (int e = 0; e < emb; ++e) total += spec.layers[e].width;
  Mat cur(batch.rows(), total);
  for (int e = 0; e < emb; ++e) {
    const auto& ls = spec.layers[e];
    const Mat& table = state.layers[e].w;
    const int off = embedding_column_offset(spec, e);
    for (Index r = 0; r < batch.rows(); ++r) {
      const Real raw = batch(r, e);
      const auto idx = static_cast<long long>(raw);
      if (!(raw >= 0) || idx >= ls.vocab_size)
        throw LabelError("embedding index " + std::to_string(raw) + " out of range [0, " +
                         std::to_string(ls.vocab_size) + ") in layer " + std::to_string(e));
      cur.block(r, off, 1, ls.width) = table.row(idx);
    }
  }
  if (spec.input_width > 0)
    cur.rightCols(spec.input_width) = batch.rightCols(spec.input_width);
  return cur;
}

struct ForwardCache {
  Mat composite;               // input to the first non-embedding layer
  std::vector<Mat> outputs;    // post-layer output per layer index
  std::vector<Mat> drop_mask;  // dropout layers: scaled keep mask
  std::vector<Mat> bn_xhat;    // batch_norm layers: normalized input
  std::vector<Mat> bn_invstd;  // batch_norm layers: 1/sqrt(var+eps), 1 x w
};

Mat run_forward(const NetworkSpec& spec, NetworkState& state, const Mat& batch,
                const ForwardMode& mode, ForwardCache* cache, ForwardTrace* trace,
                const std::set<int>& trace_layers) {
  if (batch.cols() != spec.batch_columns())
    throw ShapeError("batch has " + std::to_string(batch.cols()) + " columns, network expects " +
                     std::to_string(spec.batch_columns()));
  if (mode.kind == ForwardMode::Kind::McDropout && !(mode.mc_rate >= 0.0 && mode.mc_rate < 1.0))
    throw InvalidRateError("mc dropout rate must be in [0, 1)");

  const int emb = spec.embedding_count();
  const int nlayers = static_cast<int>(spec.layers.size());
  const bool training = mode.kind == ForwardMode::Kind::Train;
  const bool sampling = training || mode.kind == ForwardMode::Kind::McDropout;
  RngEngine eng = make_engine(mode.seed);

  Mat cur = compose_input(spec, state, batch);
  if (cache) {
    cache->composite = cur;
    cache->outputs.resize(nlayers);
    cache->drop_mask.resize(nlayers);
    cache->bn_xhat.resize(nlayers);
    cache->bn_invstd.resize(nlayers);
  }
  if (trace) {
    for (int e = 0; e < emb; ++e)
      if (trace_layers.count(e))
        trace->outputs[e] = cur.block(0, embedding_column_offset(spec, e), cur.rows(),
                                      spec.layers[e].width);
  }

  for (int i = emb; i < nlayers; ++i) {
    const auto& ls = spec.layers[i];
    LayerState& st = state.layers[i];
    switch (ls.kind) {
      case LayerKind::Dense:
        cur = (cur * st.w).rowwise() + st.b.row(0);
        break;
      case LayerKind::Relu:
        cur = cur.cwiseMax(Real(0));
        break;
      case LayerKind::Dropout: {
        if (sampling) {
          const double rate = training ? ls.dropout_rate : mode.mc_rate;
          Mat mask = dropout_mask(cur.rows(), cur.cols(), rate, eng);
          cur = cur.cwiseProduct(mask);
          if (cache) cache->drop_mask[i] = std::move(mask);
        }
        break;
      }
      case LayerKind::BatchNorm: {
        Mat mean, var;
        if (training) {
          mean = cur.colwise().mean();
          Mat centered = cur.rowwise() - mean.row(0);
          var = centered.array().square().colwise().mean();
          st.running_mean = (Real(1) - kBnMomentum) * st.running_mean + kBnMomentum * mean;
          st.running_var = (Real(1) - kBnMomentum) * st.running_var + kBnMomentum * var;
        } else {
          mean = st.running_mean;
          var = st.running_var;
        }
        Mat invstd = (var.array() + kBnEpsilon).rsqrt();
        Mat xhat = (cur.rowwise() - mean.row(0)).array().rowwise() * invstd.row(0).array();
        cur = (xhat.array().rowwise() * st.w.row(0).array()).rowwise() + st.b.row(0).array();
        if (cache) {
          cache->bn_xhat[i] = std::move(xhat);
          cache->bn_invstd[i] = std::move(invstd);
        }
        break;
      }
      case LayerKind::Softmax:
        cur = softmax_rows(cur);
        break;
      case LayerKind::Sigmoid:
        cur = sigmoid(cur);
        break;
      case LayerKind::Embedding:
        throw ValidationError("embedding layers must form a prefix");
    }
    if (cache) cache->outputs[i] = cur;
    if (trace && trace_layers.count(i)) trace->outputs[i] = cur;
  }
  assert_finite(cur, "forward");
  return cur;
}

// Expands index labels to one-hot; validates range. Accepts one-hot as-is.
Mat multiclass_targets(const Mat& labels, int k, Index batch_rows) {
  if (labels.rows() != batch_rows) throw ShapeError("label row count mismatch");
  if (labels.cols() == k) return labels;
  if (labels.cols() != 1)
    throw ShapeError("multiclass labels must be one class-index column or K one-hot columns");
  Mat y = Mat::Zero(batch_rows, k);
  for (Index r = 0; r < batch_rows; ++r) {
    const Real raw = labels(r, 0);
    const auto cls = static_cast<long long>(raw);
    if (!(raw >= 0) || cls >= k)
      throw LabelError("class label " + std::to_string(raw) + " outside [0, " +
                       std::to_string(k) + ")");
    y(r, cls) = Real(1);
  }
  return y;
}

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Relu: return "relu";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::BatchNorm: return "batch_norm";
    case LayerKind::Embedding: return "embedding";
    case LayerKind::Softmax: return "softmax";
    case LayerKind::Sigmoid: return "sigmoid";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
  if (name == "dense") return LayerKind::Dense;
  if (name == "relu") return LayerKind::Relu;
  if (name == "dropout") return LayerKind::Dropout;
  if (name == "batch_norm") return LayerKind::BatchNorm;
  if (name == "embedding") return LayerKind::Embedding;
  if (name == "softmax") return LayerKind::Softmax;
  if (name == "sigmoid") return LayerKind::Sigmoid;
  throw ValidationError("unknown layer kind: " + name);
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Regression: return "regression";
    case TaskKind::BinaryClassification: return "binary_classification";
    case TaskKind::Multiclass: return "multiclass";
  }
  return "?";
}

Task task_from_string(const std::string& name, int classes) {
  if (name == "regression") return Task::regression();
  if (name == "binary_classification" || name == "binary") return Task::binary();
  if (name == "multiclass") return Task::multiclass(classes);
  throw ValidationError("unknown task kind: " + name);
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::Mse: return "mse";
    case LossKind::SoftmaxCe: return "softmax_ce";
    case LossKind::SigmoidBce: return "sigmoid_bce";
  }
  return "?";
}

LossKind loss_kind_from_string(const std::string& name) {
  if (name == "mse") return LossKind::Mse;
  if (name == "softmax_ce") return LossKind::SoftmaxCe;
  if (name == "sigmoid_bce") return LossKind::SigmoidBce;
  throw ValidationError("unknown loss kind: " + name);
}

int NetworkSpec::embedding_count() const {
  int e = 0;
  while (e < static_cast<int>(layers.size()) && layers[e].kind == LayerKind::Embedding) ++e;
  return e;
}

int NetworkSpec::batch_columns() const { return embedding_count() + input_width; }

int NetworkSpec::layer_output_width(int layer_index) const {
  const int emb = embedding_count();
  int cur = input_width;
  for (int e = 0; e < emb; ++e) cur += layers[e].width;
  if (layer_index < emb) return layers[layer_index].width;
  for (int i = emb; i <= layer_index; ++i)
    if (layers[i].kind == LayerKind::Dense) cur = layers[i].width;
  return cur;
}

int NetworkSpec::output_width() const {
  return layer_output_width(static_cast<int>(layers.size()) - 1);
}

std::vector<int> NetworkSpec::fcl_layer_indices() const {
  std::vector<int> out;
  const int n = static_cast<int>(layers.size());
  for (int i = 0; i < n - 1; ++i) {  // the head is never a capture point
    if (layers[i].kind != LayerKind::Relu) continue;
    for (int j = i - 1; j >= 0; --j) {
      const LayerKind k = layers[j].kind;
      if (k == LayerKind::BatchNorm || k == LayerKind::Dropout) continue;
      if (k == LayerKind::Dense) out.push_back(i);
      break;
    }
  }
  return out;
}

int64_t NetworkSpec::parameter_count() const {
  int64_t total = 0;
  const int emb = embedding_count();
  int cur = input_width;
  for (int e = 0; e < emb; ++e) {
    total += int64_t(layers[e].vocab_size) * layers[e].width;
    cur += layers[e].width;
  }
  for (int i = emb; i < static_cast<int>(layers.size()); ++i) {
    if (layers[i].kind == LayerKind::Dense) {
      total += int64_t(cur) * layers[i].width + layers[i].width;
      cur = layers[i].width;
    } else if (layers[i].kind == LayerKind::BatchNorm) {
      total += 2 * int64_t(cur);
    }
  }
  return total;
}

void validate(const NetworkSpec& spec) {
  require(!spec.layers.empty(), "network needs at least one layer");
  require(spec.input_width >= 0, "input_width must be nonnegative");
  const int n = static_cast<int>(spec.layers.size());
  const int emb = spec.embedding_count();
  for (int i = emb; i < n; ++i)
    require(spec.layers[i].kind != LayerKind::Embedding,
            "embedding layers must form a contiguous prefix");
  require(spec.batch_columns() >= 1, "network consumes no input columns");

  int cur = spec.input_width;
  for (int e = 0; e < emb; ++e) {
    require(spec.layers[e].vocab_size >= 1, "embedding vocab_size must be >= 1");
    require(spec.layers[e].width >= 1, "embedding width must be >= 1");
    cur += spec.layers[e].width;
  }
  for (int i = emb; i < n; ++i) {
    const auto& ls = spec.layers[i];
    switch (ls.kind) {
      case LayerKind::Dense:
        require(ls.width >= 1, "dense width must be >= 1");
        require(cur >= 1, "dense layer has no input columns");
        cur = ls.width;
        break;
      case LayerKind::Dropout: {
        require(ls.dropout_rate >= 0.0 && ls.dropout_rate < 1.0,
                "dropout rate must be in [0, 1)");
        require(i > 0, "dropout cannot be the first layer");
        const LayerKind prev = spec.layers[i - 1].kind;
        require(prev == LayerKind::Dense || prev == LayerKind::Relu ||
                    prev == LayerKind::BatchNorm,
                "dropout may only follow dense, relu or batch_norm layers");
        break;
      }
      case LayerKind::Softmax:
      case LayerKind::Sigmoid:
        require(i == n - 1, to_string(ls.kind) + " must be the final layer");
        break;
      case LayerKind::Relu:
      case LayerKind::BatchNorm:
        break;
      case LayerKind::Embedding:
        break;  // unreachable, checked above
    }
  }

  switch (spec.task.kind) {
    case TaskKind::Multiclass:
      require(spec.task.classes >= 2, "multiclass task needs K >= 2");
      require(spec.layers.back().kind == LayerKind::Softmax,
              "multiclass network must end in softmax");
      require(spec.output_width() == spec.task.classes,
              "softmax width must equal the class count");
      break;
    case TaskKind::BinaryClassification:
      require(spec.layers.back().kind == LayerKind::Sigmoid,
              "binary network must end in sigmoid");
      require(spec.output_width() == 1, "binary head must have width 1");
      break;
    case TaskKind::Regression:
      require(spec.layers.back().kind != LayerKind::Softmax &&
                  spec.layers.back().kind != LayerKind::Sigmoid,
              "regression network must not end in softmax/sigmoid");
      break;
  }
}

void validate(const TrainConfig& config) {
  require(config.epochs >= 0, "epochs must be >= 0");
  require(config.batch_size >= 1, "batch_size must be >= 1");
  require(config.learning_rate > 0, "learning_rate must be > 0");
  require(config.adam_beta1 > 0 && config.adam_beta1 < 1, "beta1 must be in (0, 1)");
  require(config.adam_beta2 > 0 && config.adam_beta2 < 1, "beta2 must be in (0, 1)");
  require(config.adam_epsilon > 0, "epsilon must be > 0");
  require(config.lr_decay_factor > 0 && config.lr_decay_factor <= 1,
          "lr_decay_factor must be in (0, 1]");
}

NetworkState init_state(const NetworkSpec& spec, uint64_t seed) {
  validate(spec);
  RngEngine eng = make_engine(seed);
  NetworkState state;
  state.layers.resize(spec.layers.size());
  const int emb = spec.embedding_count();
  const int n = static_cast<int>(spec.layers.size());
  int cur = spec.input_width;
  for (int e = 0; e < emb; ++e) cur += spec.layers[e].width;

  auto fill_uniform = [&eng](Mat& m, Real lo, Real hi) {
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = uniform_in(eng, lo, hi);
  };

  for (int i = 0; i < n; ++i) {
    const auto& ls = spec.layers[i];
    LayerState& st = state.layers[i];
    switch (ls.kind) {
      case LayerKind::Embedding:
        st.w.resize(ls.vocab_size, ls.width);
        fill_uniform(st.w, -0.05, 0.05);
        st.m_w = Mat::Zero(ls.vocab_size, ls.width);
        st.v_w = Mat::Zero(ls.vocab_size, ls.width);
        break;
      case LayerKind::Dense: {
        // He-uniform when the dense feeds a ReLU (looking through bn/dropout),
        // Glorot-uniform otherwise.
        bool feeds_relu = false;
        for (int j = i + 1; j < n; ++j) {
          const LayerKind k = spec.layers[j].kind;
          if (k == LayerKind::BatchNorm || k == LayerKind::Dropout) continue;
          feeds_relu = k == LayerKind::Relu;
          break;
        }
        const Real limit = feeds_relu ? std::sqrt(Real(6) / Real(cur))
                                      : std::sqrt(Real(6) / Real(cur + ls.width));
        st.w.resize(cur, ls.width);
        fill_uniform(st.w, -limit, limit);
        st.b = Mat::Zero(1, ls.width);
        st.m_w = Mat::Zero(cur, ls.width);
        st.v_w = Mat::Zero(cur, ls.width);
        st.m_b = Mat::Zero(1, ls.width);
        st.v_b = Mat::Zero(1, ls.width);
        cur = ls.width;
        break;
      }
      case LayerKind::BatchNorm:
        st.w = Mat::Ones(1, cur);
        st.b = Mat::Zero(1, cur);
        st.running_mean = Mat::Zero(1, cur);
        st.running_var = Mat::Ones(1, cur);
        st.m_w = Mat::Zero(1, cur);
        st.v_w = Mat::Zero(1, cur);
        st.m_b = Mat::Zero(1, cur);
        st.v_b = Mat::Zero(1, cur);
        break;
      default:
        break;
    }
  }
  return state;
}

std::pair<Mat, ForwardTrace> forward(const NetworkSpec& spec, NetworkState& state,
                                     const Mat& batch, const ForwardMode& mode,
                                     const std::set<int>& trace_layers) {
  validate(spec);
  ForwardTrace trace;
  trace.mode = mode;
  Mat preds = run_forward(spec, state, batch, mode, nullptr, &trace, trace_layers);
  return {std::move(preds), std::move(trace)};
}

std::pair<Mat, ForwardTrace> forward(const NetworkSpec& spec, const NetworkState& state,
                                     const Mat& batch, const ForwardMode& mode,
                                     const std::set<int>& trace_layers) {
  if (mode.kind == ForwardMode::Kind::Train)
    throw ValidationError("train-mode forward mutates state; pass a mutable NetworkState");
  // Eval/McDropout never touch state; the cast only satisfies the shared path.
  return forward(spec, const_cast<NetworkState&>(state), batch, mode, trace_layers);
}

namespace {

struct LossResult {
  Real loss = 0;
  Mat output_grad;      // dL/d(network output), empty when fused
  bool fused = false;   // gradient injected below the final softmax/sigmoid
  Mat fused_grad;       // dL/d(head input) when fused
};

LossResult loss_backward(const NetworkSpec& spec, const Mat& preds, const Mat& labels,
                         LossKind loss) {
  const Index b = preds.rows();
  const Index d = preds.cols();
  LossResult res;
  switch (loss) {
    case LossKind::Mse: {
      if (labels.rows() != b || labels.cols() != d)
        throw ShapeError("mse labels must match prediction shape");
      const Mat diff = preds - labels;
      res.loss = diff.array().square().sum() / Real(b * d);
      res.output_grad = diff * (Real(2) / Real(b * d));
      break;
    }
    case LossKind::SoftmaxCe: {
      if (spec.layers.back().kind != LayerKind::Softmax)
        throw ValidationError("softmax_ce requires a softmax head");
      const Mat y = multiclass_targets(labels, static_cast<int>(d), b);
      Real total = 0;
      for (Index r = 0; r < b; ++r)
        for (Index c = 0; c < d; ++c)
          if (y(r, c) > 0) total -= y(r, c) * std::log(std::max(preds(r, c), kLogFloor));
      res.loss = total / Real(b);
      res.fused = true;
      res.fused_grad = (preds - y) / Real(b);
      break;
    }
    case LossKind::SigmoidBce: {
      if (spec.layers.back().kind != LayerKind::Sigmoid)
        throw ValidationError("sigmoid_bce requires a sigmoid head");
      if (labels.rows() != b || labels.cols() != d)
        throw ShapeError("bce labels must match prediction shape");
      for (Index r = 0; r < b; ++r)
        for (Index c = 0; c < d; ++c)
          if (labels(r, c) != Real(0) && labels(r, c) != Real(1))
            throw LabelError("binary labels must be 0 or 1");
      Real total = 0;
      for (Index r = 0; r < b; ++r)
        for (Index c = 0; c < d; ++c) {
          const Real p = preds(r, c);
          const Real y = labels(r, c);
          total -= y * std::log(std::max(p, kLogFloor)) +
                   (Real(1) - y) * std::log(std::max(Real(1) - p, kLogFloor));
        }
      res.loss = total / Real(b);
      res.fused = true;
      res.fused_grad = (preds - labels) / Real(b);
      break;
    }
  }
  return res;
}

}  // namespace

std::pair<Real, Gradients> loss_and_grad(const NetworkSpec& spec, NetworkState& state,
                                         const Mat& batch, const Mat& labels, LossKind loss,
                                         uint64_t dropout_seed) {
  validate(spec);
  ForwardCache cache;
  const Mat preds = run_forward(spec, state, batch, ForwardMode::train(dropout_seed), &cache,
                                nullptr, {});
  LossResult lr = loss_backward(spec, preds, labels, loss);

  Gradients grads;
  grads.layers.resize(spec.layers.size());
  const int emb = spec.embedding_count();
  const int n = static_cast<int>(spec.layers.size());
  for (int i = 0; i < n; ++i) {
    const auto& st = state.layers[i];
    auto& g = grads.layers[i];
    if (st.w.size() > 0) g.w = Mat::Zero(st.w.rows(), st.w.cols());
    if (st.b.size() > 0) g.b = Mat::Zero(st.b.rows(), st.b.cols());
  }

  int start = n - 1;
  Mat g;
  if (lr.fused) {
    g = std::move(lr.fused_grad);
    start = n - 2;  // skip the head; gradient is already below it
  } else {
    g = std::move(lr.output_grad);
  }

  const Real bsz = Real(batch.rows());
  for (int i = start; i >= emb; --i) {
    const auto& ls = spec.layers[i];
    const Mat& input = (i == emb) ? cache.composite : cache.outputs[i - 1];
    LayerState& st = state.layers[i];
    switch (ls.kind) {
      case LayerKind::Dense:
        grads.layers[i].w = input.transpose() * g;
        grads.layers[i].b = g.colwise().sum();
        g = g * st.w.transpose();
        break;
      case LayerKind::Relu:
        g = g.cwiseProduct(
            (cache.outputs[i].array() > Real(0)).cast<Real>().matrix());
        break;
      case LayerKind::Dropout:
        if (cache.drop_mask[i].size() > 0) g = g.cwiseProduct(cache.drop_mask[i]);
        break;
      case LayerKind::BatchNorm: {
        const Mat& xhat = cache.bn_xhat[i];
        const Mat& invstd = cache.bn_invstd[i];
        Mat dgamma = (g.cwiseProduct(xhat)).colwise().sum();
        Mat dbeta = g.colwise().sum();
        grads.layers[i].w = dgamma;
        grads.layers[i].b = dbeta;
        Mat term = g;
        term.array().rowwise() -= dbeta.row(0).array() / bsz;
        term.array() -= xhat.array().rowwise() * (dgamma.row(0).array() / bsz);
        g = (term.array().rowwise() * (st.w.row(0).array() * invstd.row(0).array())).matrix();
        break;
      }
      case LayerKind::Softmax: {
        const Mat& p = cache.outputs[i];
        Mat gx(g.rows(), g.cols());
        for (Index r = 0; r < g.rows(); ++r) {
          const Real dot = g.row(r).dot(p.row(r));
          gx.row(r) = p.row(r).array() * (g.row(r).array() - dot);
        }
        g = gx;
        break;
      }
      case LayerKind::Sigmoid: {
        const Mat& s = cache.outputs[i];
        g = g.cwiseProduct(s.cwiseProduct((Real(1) - s.array()).matrix()));
        break;
      }
      case LayerKind::Embedding:
        break;  // handled below
    }
  }

  // Scatter composite-input gradient into embedding tables.
  for (int e = 0; e < emb; ++e) {
    const auto& ls = spec.layers[e];
    const int off = embedding_column_offset(spec, e);
    Mat& gt = grads.layers[e].w;
    for (Index r = 0; r < batch.rows(); ++r) {
      const auto idx = static_cast<long long>(batch(r, e));
      gt.row(idx) += g.block(r, off, 1, ls.width);
    }
  }

  return {lr.loss, std::move(grads)};
}

Real loss_value(const NetworkSpec& spec, NetworkState& state, const Mat& batch,
                const Mat& labels, LossKind loss, uint64_t dropout_seed) {
  ForwardCache cache;
  const Mat preds = run_forward(spec, state, batch, ForwardMode::train(dropout_seed), &cache,
                                nullptr, {});
  return loss_backward(spec, preds, labels, loss).loss;
}

Real effective_learning_rate(const TrainConfig& config, uint64_t epoch) {
  Real lr = config.learning_rate;
  for (int d : config.lr_decay_epochs)
    if (epoch >= static_cast<uint64_t>(d)) lr *= config.lr_decay_factor;
  return lr;
}

void adam_step(NetworkState& state, const Gradients& grads, const TrainConfig& config) {
  state.step += 1;
  const Real t = Real(state.step);
  const Real lr = effective_learning_rate(config, state.epoch);
  const Real b1 = config.adam_beta1;
  const Real b2 = config.adam_beta2;
  const Real corr1 = Real(1) - std::pow(b1, t);
  const Real corr2 = Real(1) - std::pow(b2, t);

  auto update = [&](Mat& param, Mat& m, Mat& v, const Mat& g) {
    if (param.size() == 0 || g.size() == 0) return;
    m = b1 * m + (Real(1) - b1) * g;
    v = b2 * v + (Real(1) - b2) * g.cwiseProduct(g);
    param.array() -=
        lr * (m.array() / corr1) / ((v.array() / corr2).sqrt() + config.adam_epsilon);
  };

  for (size_t i = 0; i < state.layers.size(); ++i) {
    if (i >= grads.layers.size()) break;
    update(state.layers[i].w, state.layers[i].m_w, state.layers[i].v_w, grads.layers[i].w);
    update(state.layers[i].b, state.layers[i].m_b, state.layers[i].v_b, grads.layers[i].b);
  }
}

TrainResult train(const NetworkSpec& spec, const Mat& x, const Mat& y,
                  const TrainConfig& config) {
  validate(spec);
  validate(config);
  const Index n = x.rows();
  if (n == 0) throw ValidationError("training set is empty");
  if (y.rows() != n) throw ShapeError("feature/label row counts differ");
  if (config.batch_size > n)
    throw ValidationError("batch_size exceeds the dataset size");

  TrainResult result;
  result.state = init_state(spec, mix_seed(config.seed, seed_stream::kInit));
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index(0));

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    result.state.epoch = static_cast<uint64_t>(epoch);
    RngEngine shuffle_eng = make_engine(mix_seed(config.seed, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_eng);

    const uint64_t epoch_drop =
        mix_seed(mix_seed(config.seed, seed_stream::kBatchDropout), static_cast<uint64_t>(epoch));
    Real total = 0;
    Index seen = 0;
    int batch_index = 0;
    for (Index begin = 0; begin < n; begin += config.batch_size, ++batch_index) {
      const Index rows = std::min<Index>(config.batch_size, n - begin);
      Mat xb(rows, x.cols()), yb(rows, y.cols());
      for (Index r = 0; r < rows; ++r) {
        xb.row(r) = x.row(order[begin + r]);
        yb.row(r) = y.row(order[begin + r]);
      }
      auto [loss, grads] = loss_and_grad(spec, result.state, xb, yb, config.loss,
                                         mix_seed(epoch_drop, static_cast<uint64_t>(batch_index)));
      if (!std::isfinite(loss))
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch));
      adam_step(result.state, grads, config);
      total += loss * Real(rows);
      seen += rows;
    }
    result.history.push_back(total / Real(seen));
  }
  return result;
}

}  // namespace dpu
