#pragma once

// Forward passes for the simple RNN, the linear-transition RNN (LT-RNN), the
// LSTM with optional peepholes and the l2-pooled LT-RNN.  Every forward pass
// works on a batch: inputs are one N x B matrix per time step (column b is
// sample b) and the trace keeps what backpropagation through time needs.
//
// Shapes: the encoder U is hidden x N (it maps an input to the hidden space),
// the decoder W is M x hidden.  h_0 = 0 (and c_0 = 0 for the LSTM).

#include "ornn/numerics.hpp"
#include "ornn/tasks.hpp"

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace ornn {

enum class Nonlinearity { identity, relu, tanh };

inline std::string_view to_string(Nonlinearity n) {
  switch (n) {
    case Nonlinearity::identity: return "identity";
    case Nonlinearity::relu: return "relu";
    case Nonlinearity::tanh: return "tanh";
  }
  return "?";
}

inline Nonlinearity parse_nonlinearity(std::string_view s) {
  if (s == "identity" || s == "linear") return Nonlinearity::identity;
  if (s == "relu") return Nonlinearity::relu;
  if (s == "tanh") return Nonlinearity::tanh;
  throw std::invalid_argument("unknown nonlinearity: " + std::string(s));
}

inline Matrix apply(Nonlinearity n, const Matrix& x) {
  switch (n) {
    case Nonlinearity::identity: return x;
    case Nonlinearity::relu: return x.cwiseMax(0.0);
    case Nonlinearity::tanh: return x.array().tanh().matrix();
  }
  return x;
}

/// σ'(x) evaluated from the pre-activation; the ReLU derivative at 0 is 0.
inline Matrix derivative(Nonlinearity n, const Matrix& pre) {
  switch (n) {
    case Nonlinearity::identity: return Matrix::Ones(pre.rows(), pre.cols());
    case Nonlinearity::relu: return (pre.array() > 0.0).cast<double>().matrix();
    case Nonlinearity::tanh: return (1.0 - pre.array().tanh().square()).matrix();
  }
  return pre;
}

// ---------------------------------------------------------------------------
// Parameter bundles.  tensors() lists every trainable array in a fixed order;
// optimizers, gradient checks and checkpoints walk that list.  Biases are
// stored as hidden x 1 matrices.
// ---------------------------------------------------------------------------

template <class M>
struct NamedTensorT {
  std::string_view name;
  M* value;
};
using NamedTensor = NamedTensorT<Matrix>;
using ConstNamedTensor = NamedTensorT<const Matrix>;

/// h_t = σ(U x_t + V h_{t-1} + b),  y_t = W h_t
struct SRnnParams {
  Matrix U, V, b, W;
  Nonlinearity nonlinearity = Nonlinearity::tanh;

  std::vector<NamedTensor> tensors() { return {{"U", &U}, {"V", &V}, {"b", &b}, {"W", &W}}; }
  std::vector<ConstNamedTensor> tensors() const {
    return {{"U", &U}, {"V", &V}, {"b", &b}, {"W", &W}};
  }
};

/// h_t = σ(U x_t + b) + V h_{t-1},  y_t = W h_t
struct LtRnnParams {
  Matrix U, V, b, W;
  Nonlinearity nonlinearity = Nonlinearity::identity;

  std::vector<NamedTensor> tensors() { return {{"U", &U}, {"V", &V}, {"b", &b}, {"W", &W}}; }
  std::vector<ConstNamedTensor> tensors() const {
    return {{"U", &U}, {"V", &V}, {"b", &b}, {"W", &W}};
  }
};

/// Gate order is (input i, forget f, output o, update g).  With peepholes the
/// previous cell state feeds every gate through a full hidden x hidden matrix.
struct LstmParams {
  Matrix Ui, Uf, Uo, Ug;
  Matrix Vi, Vf, Vo, Vg;
  Matrix bi, bf, bo, bg;
  Matrix W;
  bool peephole = false;
  Matrix Pi, Pf, Po, Pg;  ///< peephole weights, empty unless peephole

  std::vector<NamedTensor> tensors() {
    std::vector<NamedTensor> t{{"U_i", &Ui}, {"U_f", &Uf}, {"U_o", &Uo}, {"U_g", &Ug},
                               {"V_i", &Vi}, {"V_f", &Vf}, {"V_o", &Vo}, {"V_g", &Vg},
                               {"b_i", &bi}, {"b_f", &bf}, {"b_o", &bo}, {"b_g", &bg},
                               {"W", &W}};
    if (peephole) t.insert(t.end(), {{"W_i", &Pi}, {"W_f", &Pf}, {"W_o", &Po}, {"W_g", &Pg}});
    return t;
  }
  std::vector<ConstNamedTensor> tensors() const {
    std::vector<ConstNamedTensor> t{{"U_i", &Ui}, {"U_f", &Uf}, {"U_o", &Uo}, {"U_g", &Ug},
                                    {"V_i", &Vi}, {"V_f", &Vf}, {"V_o", &Vo}, {"V_g", &Vg},
                                    {"b_i", &bi}, {"b_f", &bf}, {"b_o", &bo}, {"b_g", &bg},
                                    {"W", &W}};
    if (peephole) t.insert(t.end(), {{"W_i", &Pi}, {"W_f", &Pf}, {"W_o", &Po}, {"W_g", &Pg}});
    return t;
  }
};

/// LT-RNN recurrence with y_t = W_I h_t + W_P P_k(h_t).
struct PooledLtRnnParams {
  Matrix U, V, b, W_I, W_P;
  int pool = 2;
  Nonlinearity nonlinearity = Nonlinearity::identity;

  std::vector<NamedTensor> tensors() {
    return {{"U", &U}, {"V", &V}, {"b", &b}, {"W_I", &W_I}, {"W_P", &W_P}};
  }
  std::vector<ConstNamedTensor> tensors() const {
    return {{"U", &U}, {"V", &V}, {"b", &b}, {"W_I", &W_I}, {"W_P", &W_P}};
  }
};

using Model = std::variant<SRnnParams, LtRnnParams, LstmParams, PooledLtRnnParams>;

enum class Architecture { srnn, ltrnn, lstm, pooled };

inline Architecture architecture_of(const Model& m) {
  return static_cast<Architecture>(m.index());
}

inline std::vector<NamedTensor> tensors(Model& m) {
  return std::visit([](auto& p) { return p.tensors(); }, m);
}
inline std::vector<ConstNamedTensor> tensors(const Model& m) {
  return std::visit([](const auto& p) { return p.tensors(); }, m);
}

/// A zero-filled bundle with the same alternative and shapes as m.
inline Model zeros_like(const Model& m) {
  Model z = m;
  for (auto& t : tensors(z)) t.value->setZero();
  return z;
}

inline Eigen::Index hidden_size(const Model& m) {
  return std::visit([](const auto& p) -> Eigen::Index {
    if constexpr (std::is_same_v<std::decay_t<decltype(p)>, LstmParams>) {
      return p.Vi.rows();
    } else {
      return p.V.rows();
    }
  }, m);
}

/// The recurrent transition V of an LT-RNN, pooled LT-RNN or sRNN; nullptr for the LSTM.
inline Matrix* transition(Model& m) {
  return std::visit([](auto& p) -> Matrix* {
    if constexpr (std::is_same_v<std::decay_t<decltype(p)>, LstmParams>) {
      return nullptr;
    } else {
      return &p.V;
    }
  }, m);
}
inline const Matrix* transition(const Model& m) { return transition(const_cast<Model&>(m)); }

// ---------------------------------------------------------------------------
// Batches of task samples
// ---------------------------------------------------------------------------

struct CopyTargets {
  std::vector<std::vector<int>> classes;  ///< [step][column], 0-based class index
};

struct AddingTargets {
  Eigen::RowVectorXd values;  ///< required output at the final step, per column
};

struct Batch {
  std::vector<Matrix> inputs;  ///< one N x B matrix per step
  std::variant<CopyTargets, AddingTargets> targets;

  Eigen::Index size() const { return inputs.empty() ? 0 : inputs.front().cols(); }
  int length() const { return static_cast<int>(inputs.size()); }
};

inline Batch make_batch(std::span<const CopySample> samples) {
  if (samples.empty()) throw std::invalid_argument("make_batch: no samples");
  const CopyConfig& cfg = samples.front().config;
  const int n = cfg.length();
  const auto cols = static_cast<Eigen::Index>(samples.size());
  Batch batch;
  CopyTargets targets;
  batch.inputs.assign(static_cast<std::size_t>(n), Matrix::Zero(cfg.num_classes(), cols));
  targets.classes.assign(static_cast<std::size_t>(n), std::vector<int>(samples.size()));
  for (Eigen::Index c = 0; c < cols; ++c) {
    const CopySample& s = samples[static_cast<std::size_t>(c)];
    if (s.config.K != cfg.K || s.config.length() != n) {
      throw std::invalid_argument("make_batch: samples with different shapes");
    }
    for (int t = 0; t < n; ++t) {
      batch.inputs[t](s.inputs[t] - 1, c) = 1.0;
      targets.classes[t][c] = s.targets[t] - 1;
    }
  }
  batch.targets = std::move(targets);
  return batch;
}

inline Batch make_batch(std::span<const AddingSample> samples) {
  if (samples.empty()) throw std::invalid_argument("make_batch: no samples");
  const int n = samples.front().length();
  const auto cols = static_cast<Eigen::Index>(samples.size());
  Batch batch;
  AddingTargets targets;
  targets.values.resize(cols);
  batch.inputs.assign(static_cast<std::size_t>(n), Matrix::Zero(2, cols));
  for (Eigen::Index c = 0; c < cols; ++c) {
    const AddingSample& s = samples[static_cast<std::size_t>(c)];
    if (s.length() != n) throw std::invalid_argument("make_batch: samples with different lengths");
    for (int t = 0; t < n; ++t) {
      batch.inputs[t](0, c) = s.values[t];
      batch.inputs[t](1, c) = s.markers[t];
    }
    targets.values(c) = s.target;
  }
  batch.targets = std::move(targets);
  return batch;
}

inline Batch make_batch(const TaskSample& sample) {
  return std::visit([](const auto& s) {
    using S = std::decay_t<decltype(s)>;
    return make_batch(std::span<const S>(&s, 1));
  }, sample);
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

struct StepCache {
  Matrix pre;                 ///< σ argument (LT: Ux+b, sRNN: Ux+Vh+b)
  Matrix h;                   ///< hidden state after clipping
  Matrix y;                   ///< output
  Eigen::RowVectorXd clip;    ///< per-column rescale factor applied to h (1 = inactive)
  Matrix i, f, o, g, c;       ///< LSTM gates and cell state
  Matrix pooled;              ///< P_k(h) for the pooled model
};

struct ForwardTrace {
  Architecture architecture = Architecture::ltrnn;
  std::vector<StepCache> steps;

  int length() const { return static_cast<int>(steps.size()); }
  const Matrix& output(int t) const { return steps[static_cast<std::size_t>(t)].y; }
};

namespace detail {

inline void check_inputs(std::span<const Matrix> inputs, Eigen::Index n, const char* who) {
  if (inputs.empty()) throw std::invalid_argument(std::string(who) + ": empty input sequence");
  const Eigen::Index cols = inputs.front().cols();
  for (const Matrix& x : inputs) {
    if (x.rows() != n || x.cols() != cols) {
      throw std::invalid_argument(std::string(who) + ": input has " + std::to_string(x.rows()) +
                                  " rows, encoder expects " + std::to_string(n));
    }
  }
}

inline void check_shapes(const Matrix& U, const Matrix& V, const Matrix& b, const char* who) {
  if (V.rows() != V.cols() || U.rows() != V.rows() || b.rows() != V.rows() || b.cols() != 1) {
    throw std::invalid_argument(std::string(who) + ": inconsistent parameter shapes");
  }
}

/// Rescale columns whose Euclidean norm exceeds clip_l; returns the factors.
inline Eigen::RowVectorXd clip_columns(Matrix& h, std::optional<double> clip_l) {
  Eigen::RowVectorXd scale = Eigen::RowVectorXd::Ones(h.cols());
  if (!clip_l) return scale;
  for (Eigen::Index c = 0; c < h.cols(); ++c) {
    const double norm = h.col(c).norm();
    if (norm > *clip_l) {
      scale(c) = *clip_l / norm;
      h.col(c) *= scale(c);
    }
  }
  return scale;
}

inline void require_finite(const Matrix& m, int step, const char* who) {
  if (!m.allFinite()) {
    throw NumericalError(std::string(who) + ": non-finite activation at step " +
                         std::to_string(step));
  }
}

}  // namespace detail

/// P(h)_i = sqrt(sum over the i-th group of k consecutive entries of h_j^2).
/// Works column-wise on a batch.
inline Matrix l2_pool(const Matrix& h, int k) {
  if (k < 1 || h.rows() % k != 0) {
    throw std::invalid_argument("l2_pool: length " + std::to_string(h.rows()) +
                                " not divisible by pool size " + std::to_string(k));
  }
  const Eigen::Index groups = h.rows() / k;
  Matrix p(groups, h.cols());
  for (Eigen::Index c = 0; c < h.cols(); ++c)
    for (Eigen::Index i = 0; i < groups; ++i) p(i, c) = h.col(c).segment(i * k, k).norm();
  return p;
}

inline ForwardTrace ltrnn_forward(const LtRnnParams& p, std::span<const Matrix> inputs,
                                  std::optional<double> clip_l = std::nullopt) {
  detail::check_shapes(p.U, p.V, p.b, "ltrnn_forward");
  detail::check_inputs(inputs, p.U.cols(), "ltrnn_forward");
  ForwardTrace trace;
  trace.architecture = Architecture::ltrnn;
  trace.steps.resize(inputs.size());
  Matrix h = Matrix::Zero(p.V.rows(), inputs.front().cols());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    StepCache& s = trace.steps[t];
    s.pre = p.U * inputs[t];
    s.pre.colwise() += p.b.col(0);
    Matrix next = apply(p.nonlinearity, s.pre);
    next.noalias() += p.V * h;
    s.clip = detail::clip_columns(next, clip_l);
    detail::require_finite(next, static_cast<int>(t), "ltrnn_forward");
    h = std::move(next);
    s.y = p.W * h;
    s.h = h;
  }
  return trace;
}

inline ForwardTrace srnn_forward(const SRnnParams& p, std::span<const Matrix> inputs,
                                 std::optional<double> clip_l = std::nullopt) {
  detail::check_shapes(p.U, p.V, p.b, "srnn_forward");
  detail::check_inputs(inputs, p.U.cols(), "srnn_forward");
  ForwardTrace trace;
  trace.architecture = Architecture::srnn;
  trace.steps.resize(inputs.size());
  Matrix h = Matrix::Zero(p.V.rows(), inputs.front().cols());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    StepCache& s = trace.steps[t];
    s.pre = p.U * inputs[t];
    s.pre.noalias() += p.V * h;
    s.pre.colwise() += p.b.col(0);
    h = apply(p.nonlinearity, s.pre);
    s.clip = detail::clip_columns(h, clip_l);
    detail::require_finite(h, static_cast<int>(t), "srnn_forward");
    s.y = p.W * h;
    s.h = h;
  }
  return trace;
}

namespace detail {
inline Matrix sigmoid(const Matrix& x) {
  return (1.0 / (1.0 + (-x.array()).exp())).matrix();
}
}  // namespace detail

inline ForwardTrace lstm_forward(const LstmParams& p, std::span<const Matrix> inputs) {
  const Eigen::Index d = p.Vi.rows();
  detail::check_inputs(inputs, p.Ui.cols(), "lstm_forward");
  if (p.peephole && (p.Pi.rows() != d || p.Pi.cols() != d)) {
    throw std::invalid_argument("lstm_forward: peephole matrices missing or mis-shaped");
  }
  ForwardTrace trace;
  trace.architecture = Architecture::lstm;
  trace.steps.resize(inputs.size());
  const Eigen::Index cols = inputs.front().cols();
  Matrix h = Matrix::Zero(d, cols);
  Matrix c = Matrix::Zero(d, cols);
  const auto gate = [&](const Matrix& U, const Matrix& V, const Matrix& b, const Matrix& P,
                        const Matrix& x) {
    Matrix a = U * x;
    a.noalias() += V * h;
    if (p.peephole) a.noalias() += P * c;
    a.colwise() += b.col(0);
    return a;
  };
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    StepCache& s = trace.steps[t];
    const Matrix& x = inputs[t];
    s.i = detail::sigmoid(gate(p.Ui, p.Vi, p.bi, p.Pi, x));
    s.f = detail::sigmoid(gate(p.Uf, p.Vf, p.bf, p.Pf, x));
    s.o = detail::sigmoid(gate(p.Uo, p.Vo, p.bo, p.Po, x));
    s.g = gate(p.Ug, p.Vg, p.bg, p.Pg, x).array().tanh().matrix();
    c = (s.f.array() * c.array() + s.i.array() * s.g.array()).matrix();
    h = (s.o.array() * c.array().tanh()).matrix();
    detail::require_finite(c, static_cast<int>(t), "lstm_forward");
    detail::require_finite(h, static_cast<int>(t), "lstm_forward");
    s.c = c;
    s.h = h;
    s.clip = Eigen::RowVectorXd::Ones(cols);
    s.y = p.W * h;
  }
  return trace;
}

inline ForwardTrace pooled_forward(const PooledLtRnnParams& p, std::span<const Matrix> inputs,
                                   std::optional<double> clip_l = std::nullopt) {
  detail::check_shapes(p.U, p.V, p.b, "pooled_forward");
  detail::check_inputs(inputs, p.U.cols(), "pooled_forward");
  if (p.pool < 1 || p.V.rows() % p.pool != 0 || p.W_P.cols() * p.pool != p.V.rows() ||
      p.W_I.cols() != p.V.rows() || p.W_I.rows() != p.W_P.rows()) {
    throw std::invalid_argument("pooled_forward: inconsistent decoder / pool shapes");
  }
  ForwardTrace trace;
  trace.architecture = Architecture::pooled;
  trace.steps.resize(inputs.size());
  Matrix h = Matrix::Zero(p.V.rows(), inputs.front().cols());
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    StepCache& s = trace.steps[t];
    s.pre = p.U * inputs[t];
    s.pre.colwise() += p.b.col(0);
    Matrix next = apply(p.nonlinearity, s.pre);
    next.noalias() += p.V * h;
    s.clip = detail::clip_columns(next, clip_l);
    detail::require_finite(next, static_cast<int>(t), "pooled_forward");
    h = std::move(next);
    s.pooled = l2_pool(h, p.pool);
    s.y = p.W_I * h;
    s.y.noalias() += p.W_P * s.pooled;
    s.h = h;
  }
  return trace;
}

/// Dispatch on the model kind.  The LSTM ignores clip_l.
inline ForwardTrace forward(const Model& m, std::span<const Matrix> inputs,
                            std::optional<double> clip_l = std::nullopt) {
  return std::visit([&](const auto& p) -> ForwardTrace {
    using P = std::decay_t<decltype(p)>;
    if constexpr (std::is_same_v<P, SRnnParams>) return srnn_forward(p, inputs, clip_l);
    else if constexpr (std::is_same_v<P, LtRnnParams>) return ltrnn_forward(p, inputs, clip_l);
    else if constexpr (std::is_same_v<P, LstmParams>) return lstm_forward(p, inputs);
    else return pooled_forward(p, inputs, clip_l);
  }, m);
}

// ---------------------------------------------------------------------------
// Losses
//
// Copy tasks: mean over all steps of the softmax cross-entropy against the
// target class.  Adding: squared error of the single output at the last step.
// Both are averaged over the batch columns.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_loss_shapes(const ForwardTrace& trace, const Batch& batch) {
  if (trace.length() != batch.length() || trace.steps.empty()) {
    throw std::invalid_argument("sequence_loss: trace and batch lengths differ");
  }
  const Matrix& y = trace.steps.front().y;
  if (y.cols() != batch.size()) throw std::invalid_argument("sequence_loss: batch size mismatch");
  if (std::holds_alternative<CopyTargets>(batch.targets)) {
    const Eigen::Index classes = batch.inputs.front().rows();
    if (y.rows() != classes) {
      throw std::invalid_argument("sequence_loss: copy task needs " + std::to_string(classes) +
                                  " outputs, model has " + std::to_string(y.rows()));
    }
  } else if (y.rows() != 1) {
    throw std::invalid_argument("sequence_loss: adding task needs a single output");
  }
}

/// Column-wise log-softmax.
inline Matrix log_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const double mx = logits.col(c).maxCoeff();
    const double lse = mx + std::log((logits.col(c).array() - mx).exp().sum());
    out.col(c) = logits.col(c).array() - lse;
  }
  return out;
}

}  // namespace detail

/// Per-column losses (one entry per sample of the batch).
inline Eigen::RowVectorXd per_sample_loss(const ForwardTrace& trace, const Batch& batch) {
  detail::check_loss_shapes(trace, batch);
  const Eigen::Index cols = batch.size();
  Eigen::RowVectorXd loss = Eigen::RowVectorXd::Zero(cols);
  if (const auto* ct = std::get_if<CopyTargets>(&batch.targets)) {
    for (int t = 0; t < trace.length(); ++t) {
      const Matrix logp = detail::log_softmax(trace.output(t));
      for (Eigen::Index c = 0; c < cols; ++c) loss(c) -= logp(ct->classes[t][c], c);
    }
    loss /= static_cast<double>(trace.length());
  } else {
    const auto& at = std::get<AddingTargets>(batch.targets);
    loss = (trace.output(trace.length() - 1).row(0) - at.values).array().square().matrix();
  }
  return loss;
}

inline double sequence_loss(const ForwardTrace& trace, const Batch& batch) {
  return per_sample_loss(trace, batch).mean();
}

/// ∂(batch-mean loss)/∂y_t for every step.
inline std::vector<Matrix> output_gradients(const ForwardTrace& trace, const Batch& batch) {
  detail::check_loss_shapes(trace, batch);
  const Eigen::Index cols = batch.size();
  std::vector<Matrix> dy(trace.steps.size());
  if (const auto* ct = std::get_if<CopyTargets>(&batch.targets)) {
    const double scale = 1.0 / (static_cast<double>(trace.length()) * static_cast<double>(cols));
    for (int t = 0; t < trace.length(); ++t) {
      Matrix g = detail::log_softmax(trace.output(t)).array().exp().matrix();
      for (Eigen::Index c = 0; c < cols; ++c) g(ct->classes[t][c], c) -= 1.0;
      dy[t] = g * scale;
    }
  } else {
    const auto& at = std::get<AddingTargets>(batch.targets);
    for (int t = 0; t < trace.length(); ++t) dy[t] = Matrix::Zero(1, cols);
    const int last = trace.length() - 1;
    dy[last].row(0) = 2.0 * (trace.output(last).row(0) - at.values) / static_cast<double>(cols);
  }
  return dy;
}

/// Predicted class (0-based) per step and column, for copy-task outputs.
inline std::vector<std::vector<int>> argmax_predictions(const ForwardTrace& trace) {
  std::vector<std::vector<int>> out(trace.steps.size());
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const Matrix& y = trace.steps[t].y;
    out[t].resize(static_cast<std::size_t>(y.cols()));
    for (Eigen::Index c = 0; c < y.cols(); ++c) {
      Eigen::Index best = 0;
      y.col(c).maxCoeff(&best);
      out[t][c] = static_cast<int>(best);
    }
  }
  return out;
}

}  // namespace ornn
