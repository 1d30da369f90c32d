#pragma once

// Backpropagation through time, RMSProp, transition initializations, the soft
// orthogonality penalty and a finite-difference gradient checker.

#include "ornn/models.hpp"
#include "ornn/numerics.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ornn {

/// Gradients share the parameter layout of the model they belong to.
using Gradients = Model;

/// How the 1/T gradient normalization is applied.
enum class GradNormalization {
  none,
  hidden,     ///< scale the loss gradient injected into each hidden state by 1/T
  parameters  ///< scale the final parameter gradients by 1/T
};

namespace detail {

inline void check_trace(const Model& model, const ForwardTrace& trace, const Batch& batch) {
  if (trace.architecture != architecture_of(model)) {
    throw std::invalid_argument("backward: trace was produced by a different architecture");
  }
  if (trace.length() != batch.length() || trace.steps.empty()) {
    throw std::invalid_argument("backward: trace and batch lengths differ");
  }
  if (trace.steps.front().h.rows() != hidden_size(model)) {
    throw std::invalid_argument("backward: trace hidden size does not match parameters");
  }
}

inline Matrix scale_columns(const Matrix& m, const Eigen::RowVectorXd& s) {
  return (m.array().rowwise() * s.array()).matrix();
}

inline Gradients ltrnn_backward(const LtRnnParams& p, const ForwardTrace& trace,
                                const std::vector<Matrix>& dy, const Batch& batch,
                                double inject_scale) {
  LtRnnParams g = std::get<LtRnnParams>(zeros_like(p));
  const int n = trace.length();
  Matrix carry = Matrix::Zero(p.V.rows(), batch.size());
  for (int t = n - 1; t >= 0; --t) {
    const StepCache& s = trace.steps[t];
    g.W.noalias() += dy[t] * s.h.transpose();
    Matrix dh = carry;
    dh.noalias() += inject_scale * (p.W.transpose() * dy[t]);
    const Matrix dpre_h = scale_columns(dh, s.clip);
    if (t > 0) g.V.noalias() += dpre_h * trace.steps[t - 1].h.transpose();
    carry.noalias() = p.V.transpose() * dpre_h;
    const Matrix da = (dpre_h.array() * derivative(p.nonlinearity, s.pre).array()).matrix();
    g.U.noalias() += da * batch.inputs[t].transpose();
    g.b += da.rowwise().sum();
  }
  return g;
}

inline Gradients srnn_backward(const SRnnParams& p, const ForwardTrace& trace,
                               const std::vector<Matrix>& dy, const Batch& batch,
                               double inject_scale) {
  SRnnParams g = std::get<SRnnParams>(zeros_like(p));
  const int n = trace.length();
  Matrix carry = Matrix::Zero(p.V.rows(), batch.size());
  for (int t = n - 1; t >= 0; --t) {
    const StepCache& s = trace.steps[t];
    g.W.noalias() += dy[t] * s.h.transpose();
    Matrix dh = carry;
    dh.noalias() += inject_scale * (p.W.transpose() * dy[t]);
    const Matrix da = (scale_columns(dh, s.clip).array() *
                       derivative(p.nonlinearity, s.pre).array()).matrix();
    if (t > 0) g.V.noalias() += da * trace.steps[t - 1].h.transpose();
    carry.noalias() = p.V.transpose() * da;
    g.U.noalias() += da * batch.inputs[t].transpose();
    g.b += da.rowwise().sum();
  }
  return g;
}

inline Gradients lstm_backward(const LstmParams& p, const ForwardTrace& trace,
                               const std::vector<Matrix>& dy, const Batch& batch,
                               double inject_scale) {
  LstmParams g = std::get<LstmParams>(zeros_like(p));
  const int n = trace.length();
  const Eigen::Index d = p.Vi.rows();
  const Eigen::Index cols = batch.size();
  const Matrix zero = Matrix::Zero(d, cols);
  Matrix carry_h = zero;
  Matrix carry_c = zero;
  for (int t = n - 1; t >= 0; --t) {
    const StepCache& s = trace.steps[t];
    const Matrix& h_prev = t > 0 ? trace.steps[t - 1].h : zero;
    const Matrix& c_prev = t > 0 ? trace.steps[t - 1].c : zero;
    const Matrix& x = batch.inputs[t];
    g.W.noalias() += dy[t] * s.h.transpose();

    Matrix dh = carry_h;
    dh.noalias() += inject_scale * (p.W.transpose() * dy[t]);
    const auto tanh_c = s.c.array().tanh();
    const Matrix dc = (carry_c.array() + dh.array() * s.o.array() * (1.0 - tanh_c.square())).matrix();

    const Matrix da_i = (dc.array() * s.g.array() * s.i.array() * (1.0 - s.i.array())).matrix();
    const Matrix da_f = (dc.array() * c_prev.array() * s.f.array() * (1.0 - s.f.array())).matrix();
    const Matrix da_o = (dh.array() * tanh_c * s.o.array() * (1.0 - s.o.array())).matrix();
    const Matrix da_g = (dc.array() * s.i.array() * (1.0 - s.g.array().square())).matrix();

    carry_c = (dc.array() * s.f.array()).matrix();
    carry_h.setZero();
    const auto accumulate = [&](const Matrix& da, Matrix& dU, Matrix& dV, Matrix& db, Matrix& dP,
                                const Matrix& V, const Matrix& P) {
      dU.noalias() += da * x.transpose();
      dV.noalias() += da * h_prev.transpose();
      db += da.rowwise().sum();
      carry_h.noalias() += V.transpose() * da;
      if (p.peephole) {
        dP.noalias() += da * c_prev.transpose();
        carry_c.noalias() += P.transpose() * da;
      }
    };
    accumulate(da_i, g.Ui, g.Vi, g.bi, g.Pi, p.Vi, p.Pi);
    accumulate(da_f, g.Uf, g.Vf, g.bf, g.Pf, p.Vf, p.Pf);
    accumulate(da_o, g.Uo, g.Vo, g.bo, g.Po, p.Vo, p.Po);
    accumulate(da_g, g.Ug, g.Vg, g.bg, g.Pg, p.Vg, p.Pg);
  }
  return g;
}

/// Backward through h -> P_k(h); the subgradient at a zero pool is 0.
inline Matrix l2_pool_backward(const Matrix& h, const Matrix& pooled, const Matrix& dpooled,
                               int k) {
  Matrix dh = Matrix::Zero(h.rows(), h.cols());
  for (Eigen::Index c = 0; c < h.cols(); ++c) {
    for (Eigen::Index i = 0; i < pooled.rows(); ++i) {
      const double r = pooled(i, c);
      if (r > 0.0) dh.col(c).segment(i * k, k) = (dpooled(i, c) / r) * h.col(c).segment(i * k, k);
    }
  }
  return dh;
}

inline Gradients pooled_backward(const PooledLtRnnParams& p, const ForwardTrace& trace,
                                 const std::vector<Matrix>& dy, const Batch& batch,
                                 double inject_scale) {
  PooledLtRnnParams g = std::get<PooledLtRnnParams>(zeros_like(p));
  const int n = trace.length();
  Matrix carry = Matrix::Zero(p.V.rows(), batch.size());
  for (int t = n - 1; t >= 0; --t) {
    const StepCache& s = trace.steps[t];
    g.W_I.noalias() += dy[t] * s.h.transpose();
    g.W_P.noalias() += dy[t] * s.pooled.transpose();
    Matrix inject = p.W_I.transpose() * dy[t];
    inject += l2_pool_backward(s.h, s.pooled, p.W_P.transpose() * dy[t], p.pool);
    Matrix dh = carry;
    dh.noalias() += inject_scale * inject;
    const Matrix dpre_h = scale_columns(dh, s.clip);
    if (t > 0) g.V.noalias() += dpre_h * trace.steps[t - 1].h.transpose();
    carry.noalias() = p.V.transpose() * dpre_h;
    const Matrix da = (dpre_h.array() * derivative(p.nonlinearity, s.pre).array()).matrix();
    g.U.noalias() += da * batch.inputs[t].transpose();
    g.b += da.rowwise().sum();
  }
  return g;
}

}  // namespace detail

/// Reverse-mode gradients of the batch-mean sequence_loss.
///
/// Activation clipping is treated as a constant rescale.  With
/// GradNormalization::hidden the loss gradient entering each hidden state is
/// multiplied by 1/T (T = trace length) before it joins the recurrent sum.
inline Gradients backward(const Model& model, const ForwardTrace& trace, const Batch& batch,
                          GradNormalization norm = GradNormalization::none) {
  detail::check_trace(model, trace, batch);
  const std::vector<Matrix> dy = output_gradients(trace, batch);
  const double inv_t = 1.0 / static_cast<double>(trace.length());
  const double inject = norm == GradNormalization::hidden ? inv_t : 1.0;
  Gradients g = std::visit([&](const auto& p) -> Gradients {
    using P = std::decay_t<decltype(p)>;
    if constexpr (std::is_same_v<P, SRnnParams>) return detail::srnn_backward(p, trace, dy, batch, inject);
    else if constexpr (std::is_same_v<P, LtRnnParams>) return detail::ltrnn_backward(p, trace, dy, batch, inject);
    else if constexpr (std::is_same_v<P, LstmParams>) return detail::lstm_backward(p, trace, dy, batch, inject);
    else return detail::pooled_backward(p, trace, dy, batch, inject);
  }, model);
  if (norm == GradNormalization::parameters) {
    for (auto& t : tensors(g)) *t.value *= inv_t;
  }
  return g;
}

// ---------------------------------------------------------------------------
// RMSProp
// ---------------------------------------------------------------------------

struct RmsPropState {
  Model cache;  ///< running mean of squared gradients, same layout as the parameters
  double decay = 0.9;
  double epsilon = 1e-8;
  double learning_rate = 1e-4;
  std::uint64_t step = 0;

  static RmsPropState for_model(const Model& m, double learning_rate, double decay = 0.9) {
    if (!(decay > 0.0 && decay < 1.0)) throw std::invalid_argument("RMSProp decay must be in (0,1)");
    RmsPropState s;
    s.cache = zeros_like(m);
    s.learning_rate = learning_rate;
    s.decay = decay;
    return s;
  }
};

/// cache ← decay·cache + (1−decay)·g²;  θ ← θ − lr·g / (√cache + ε)
inline void rmsprop_step(RmsPropState& state, Model& params, const Gradients& grads) {
  if (params.index() != grads.index() || params.index() != state.cache.index()) {
    throw std::invalid_argument("rmsprop_step: parameter / gradient / cache kinds differ");
  }
  auto p = tensors(params);
  auto g = tensors(grads);
  auto c = tensors(state.cache);
  if (p.size() != g.size() || p.size() != c.size()) {
    throw std::invalid_argument("rmsprop_step: tensor lists differ");
  }
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k].value->rows() != g[k].value->rows() || p[k].value->cols() != g[k].value->cols() ||
        p[k].value->rows() != c[k].value->rows() || p[k].value->cols() != c[k].value->cols()) {
      throw std::invalid_argument("rmsprop_step: shape mismatch for " + std::string(p[k].name));
    }
  }
  // Compute every update before touching the parameters so a failure leaves them intact.
  std::vector<Matrix> updates(p.size());
  std::vector<Matrix> caches(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) {
    const Matrix& gk = *g[k].value;
    caches[k] = state.decay * *c[k].value + (1.0 - state.decay) * gk.cwiseProduct(gk);
    updates[k] = (state.learning_rate * gk.array() /
                  (caches[k].array().sqrt() + state.epsilon)).matrix();
    if (!updates[k].allFinite()) {
      throw NumericalError("rmsprop_step: non-finite update for parameter " +
                           std::string(p[k].name));
    }
  }
  for (std::size_t k = 0; k < p.size(); ++k) {
    *p[k].value -= updates[k];
    *c[k].value = std::move(caches[k]);
  }
  ++state.step;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

enum class TransitionInit { orthogonal, identity, gaussian };

/// Gaussian draws use variance 1/sqrt(d); the orthogonal mode projects such a
/// draw onto its orthogonal polar factor.
inline Matrix init_transition(TransitionInit mode, Eigen::Index d, SeededRng& rng) {
  if (d < 1) throw std::invalid_argument("init_transition: d must be >= 1");
  if (mode == TransitionInit::identity) return Matrix::Identity(d, d);
  const double stddev = std::pow(static_cast<double>(d), -0.25);
  Matrix g = rng.gaussian(d, d, stddev);
  if (mode == TransitionInit::gaussian) return g;
  return nearest_orthogonal(g);
}

struct ModelShape {
  Architecture architecture = Architecture::ltrnn;
  Eigen::Index inputs = 1;
  Eigen::Index hidden = 1;  ///< for the pooled model: the full (pool * d) hidden size
  Eigen::Index outputs = 1;
  Nonlinearity nonlinearity = Nonlinearity::identity;
  bool peephole = false;
  int pool = 2;
};

/// A bundle of the given shape with every entry drawn from N(0, stddev²).
inline Model random_model(const ModelShape& shape, SeededRng& rng, double stddev) {
  const auto n = shape.inputs, d = shape.hidden, m = shape.outputs;
  const auto g = [&](Eigen::Index r, Eigen::Index c) { return rng.gaussian(r, c, stddev); };
  switch (shape.architecture) {
    case Architecture::srnn:
      return SRnnParams{g(d, n), g(d, d), g(d, 1), g(m, d), shape.nonlinearity};
    case Architecture::ltrnn:
      return LtRnnParams{g(d, n), g(d, d), g(d, 1), g(m, d), shape.nonlinearity};
    case Architecture::lstm: {
      LstmParams p;
      for (Matrix* u : {&p.Ui, &p.Uf, &p.Uo, &p.Ug}) *u = g(d, n);
      for (Matrix* v : {&p.Vi, &p.Vf, &p.Vo, &p.Vg}) *v = g(d, d);
      for (Matrix* b : {&p.bi, &p.bf, &p.bo, &p.bg}) *b = g(d, 1);
      p.W = g(m, d);
      p.peephole = shape.peephole;
      if (p.peephole)
        for (Matrix* w : {&p.Pi, &p.Pf, &p.Po, &p.Pg}) *w = g(d, d);
      return p;
    }
    case Architecture::pooled: {
      if (shape.pool < 1 || d % shape.pool != 0) {
        throw std::invalid_argument("random_model: hidden size not divisible by pool size");
      }
      return PooledLtRnnParams{g(d, n), g(d, d), g(d, 1), g(m, d), g(m, d / shape.pool),
                               shape.pool, shape.nonlinearity};
    }
  }
  throw std::invalid_argument("random_model: unknown architecture");
}

// ---------------------------------------------------------------------------
// Soft orthogonality penalty
// L(V) = (1/m) Σ ||(VᵀV − I) x_i||²  over m random unit vectors x_i.
// With A = VᵀV − I and P = Σ x_i x_iᵀ:  ∇L = (2/m) V (A P + P A).
// ---------------------------------------------------------------------------

inline Matrix stack_columns(const std::vector<Vector>& xs, Eigen::Index dim) {
  Matrix x(dim, static_cast<Eigen::Index>(xs.size()));
  for (std::size_t i = 0; i < xs.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = xs[i];
  return x;
}

inline double ortho_penalty(const Matrix& V, const Matrix& points) {
  const Matrix a = V.transpose() * V - Matrix::Identity(V.cols(), V.cols());
  return (a * points).colwise().squaredNorm().sum() / static_cast<double>(points.cols());
}

inline Matrix ortho_penalty_gradient(const Matrix& V, const Matrix& points) {
  const Eigen::Index d = V.cols();
  const Matrix a = V.transpose() * V - Matrix::Identity(d, d);
  const Matrix p = points * points.transpose();
  return (2.0 / static_cast<double>(points.cols())) * V * (a * p + p * a);
}

/// One gradient step on the penalty, with fresh unit vectors drawn from rng.
inline Matrix ortho_penalty_step(const Matrix& V, std::size_t m, double step_size, SeededRng& rng) {
  if (V.rows() != V.cols()) throw std::invalid_argument("ortho_penalty_step: V must be square");
  if (m < 1) throw std::invalid_argument("ortho_penalty_step: m must be >= 1");
  const Matrix points =
      stack_columns(sample_unit_sphere(static_cast<std::size_t>(V.rows()), m, rng), V.rows());
  return V - step_size * ortho_penalty_gradient(V, points);
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct TensorCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  ///< entries whose ±h probe crosses a ReLU kink or a zero pool
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double tolerance = 1e-4;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& t : tensors) m = std::max(m, t.max_rel_error);
    return m;
  }
  bool passed() const { return max_rel_error() < tolerance; }
};

namespace detail {

/// Signature of the non-smooth pieces a forward pass went through: ReLU
/// activity pattern and which pools were (numerically) zero.
inline std::vector<bool> kink_signature(const Model& model, const ForwardTrace& trace) {
  std::vector<bool> sig;
  const bool relu = std::visit([](const auto& p) {
    if constexpr (std::is_same_v<std::decay_t<decltype(p)>, LstmParams>) return false;
    else return p.nonlinearity == Nonlinearity::relu;
  }, model);
  for (const auto& s : trace.steps) {
    if (relu)
      for (Eigen::Index k = 0; k < s.pre.size(); ++k) sig.push_back(s.pre.data()[k] > 0.0);
    for (Eigen::Index k = 0; k < s.pooled.size(); ++k) sig.push_back(s.pooled.data()[k] < 1e-6);
  }
  return sig;
}

}  // namespace detail

/// Compares `analytic` (defaults to backward()) against central differences of
/// sequence_loss with step h.  Relative error is |a − n| / max(|a|, |n|, 1e-7).
/// Entries whose probes change the ReLU / zero-pool pattern are skipped.
inline GradCheckReport grad_check(const Model& model, const Batch& batch, double tolerance = 1e-4,
                                  double h = 1e-5,
                                  std::optional<Gradients> analytic = std::nullopt) {
  const auto loss_and_sig = [&](const Model& m) {
    const ForwardTrace tr = forward(m, batch.inputs);
    return std::pair{sequence_loss(tr, batch), detail::kink_signature(m, tr)};
  };
  const ForwardTrace base_trace = forward(model, batch.inputs);
  const auto base_sig = detail::kink_signature(model, base_trace);
  const Gradients grads = analytic ? *analytic : backward(model, base_trace, batch);

  GradCheckReport report;
  report.tolerance = tolerance;
  Model probe = model;
  auto probe_tensors = tensors(probe);
  const auto grad_tensors = tensors(grads);
  for (std::size_t k = 0; k < probe_tensors.size(); ++k) {
    TensorCheck tc;
    tc.name = std::string(probe_tensors[k].name);
    Matrix& theta = *probe_tensors[k].value;
    const Matrix& ga = *grad_tensors[k].value;
    for (Eigen::Index e = 0; e < theta.size(); ++e) {
      const double saved = theta.data()[e];
      theta.data()[e] = saved + h;
      const auto [lp, sp] = loss_and_sig(probe);
      theta.data()[e] = saved - h;
      const auto [lm, sm] = loss_and_sig(probe);
      theta.data()[e] = saved;
      if (sp != base_sig || sm != base_sig) {
        ++tc.skipped;
        continue;
      }
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = ga.data()[e];
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-7});
      tc.max_rel_error = std::max(tc.max_rel_error, rel);
      ++tc.checked;
    }
    report.tensors.push_back(std::move(tc));
  }
  return report;
}

}  // namespace ornn
