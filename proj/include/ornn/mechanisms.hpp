#pragma once

// Hand-built LT-RNN solutions: the rotation "clock" that solves the fixed-delay
// copy task and the one-unit ReLU adder that solves the adding task, plus the
// Monte Carlo tools used to measure how the clock degrades with K, S and d.

#include "ornn/models.hpp"
#include "ornn/numerics.hpp"
#include "ornn/parallel.hpp"
#include "ornn/tasks.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

namespace ornn {

/// Counter-column entry written for each symbol row of the construction matrix.
enum class CounterIncrement {
  inverse_s_plus_1,   ///< 1/(S+1) (default)
  inverse_2s_plus_1   ///< 1/(2S+1)
};

/// The clock construction for a (K, S, T) copy task with d rotation blocks.
///
/// Hidden layout: 2d rotating coordinates followed by one counter coordinate.
/// C is (K+2) x (2d+1): rows 1..K hold unit vectors u_j plus the counter
/// increment, row K+1 (blank) is [0 ... 0, -1], row K+2 (delimiter) is
/// [0 ... 0, T+S+1].  Encoder = Cᵀ, transition = diag(Q, 1), decoder = C with
/// the blank row scaled by S+1 and the delimiter row zeroed.
struct ClockMechanism {
  int d = 1;
  int K = 2;
  int S = 1;
  int T = 2;
  std::vector<std::int64_t> phases;  ///< l_j in {1, ..., T+S}
  Matrix C;
  LtRnnParams params;

  int period() const { return T + S; }
};

inline ClockMechanism build_copy_mechanism(int d, int K, int S, int T, SeededRng& rng,
                                           CounterIncrement increment =
                                               CounterIncrement::inverse_s_plus_1) {
  if (d < 1 || K < 2 || S < 1 || T < 2) {
    throw std::invalid_argument("build_copy_mechanism: need d >= 1, K >= 2, S >= 1, T >= 2");
  }
  ClockMechanism mech;
  mech.d = d;
  mech.K = K;
  mech.S = S;
  mech.T = T;
  const int period = T + S;
  mech.phases.resize(static_cast<std::size_t>(d));
  for (auto& l : mech.phases) l = rng.uniform_int(1, period);

  const Eigen::Index n = 2 * d + 1;
  mech.C = Matrix::Zero(K + 2, n);
  const auto rows = sample_unit_sphere(static_cast<std::size_t>(2 * d), static_cast<std::size_t>(K), rng);
  const double inc = increment == CounterIncrement::inverse_s_plus_1 ? 1.0 / (S + 1) : 1.0 / (2 * S + 1);
  for (int j = 0; j < K; ++j) {
    mech.C.row(j).head(2 * d) = rows[static_cast<std::size_t>(j)].transpose();
    mech.C(j, n - 1) = inc;
  }
  mech.C(K, n - 1) = -1.0;
  mech.C(K + 1, n - 1) = static_cast<double>(T + S + 1);

  LtRnnParams& p = mech.params;
  p.nonlinearity = Nonlinearity::identity;
  p.U = mech.C.transpose();
  p.V = Matrix::Zero(n, n);
  p.V.topLeftCorner(2 * d, 2 * d) = block_rotation(mech.phases, period);
  p.V(n - 1, n - 1) = 1.0;
  p.b = Matrix::Zero(n, 1);
  p.W = mech.C;
  p.W.row(K) *= static_cast<double>(S + 1);
  p.W.row(K + 1).setZero();
  return mech;
}

struct CopyMechanismOutcome {
  bool recall = false;      ///< argmax matches at all S recall steps (T+S+1 .. T+2S)
  bool blank_span = false;  ///< argmax is the blank at every blank input step (S+1 .. T+S-1)

  bool success() const { return recall && blank_span; }
};

/// Runs the mechanism on one fixed-delimiter sample and scores its argmax outputs.
///
/// The first S outputs (while the prefix is still being read) and the output at
/// the delimiter step are not scored: the construction makes no claim there,
/// and at the delimiter step the jump of the counter makes the symbol rows win.
inline CopyMechanismOutcome evaluate_copy_mechanism(const ClockMechanism& mech,
                                                    const CopySample& sample) {
  const CopyConfig& cfg = sample.config;
  if (cfg.K != mech.K || cfg.S != mech.S || cfg.T != mech.T) {
    throw std::invalid_argument("evaluate_copy_mechanism: sample (K,S,T) differs from mechanism");
  }
  if (sample.delimiter_pos != cfg.S + cfg.T - 1 ||
      static_cast<int>(sample.inputs.size()) != cfg.length()) {
    throw std::invalid_argument("evaluate_copy_mechanism: needs a fixed-delimiter sample");
  }
  const Batch batch = make_batch(std::span<const CopySample>(&sample, 1));
  const ForwardTrace trace = ltrnn_forward(mech.params, batch.inputs);
  const auto pred = argmax_predictions(trace);
  CopyMechanismOutcome out;
  out.recall = true;
  for (int t = cfg.T + cfg.S; t < cfg.length(); ++t)
    out.recall = out.recall && pred[t][0] == sample.targets[t] - 1;
  out.blank_span = true;
  for (int t = cfg.S; t < cfg.S + cfg.T - 1; ++t)
    out.blank_span = out.blank_span && pred[t][0] == cfg.blank() - 1;
  return out;
}

struct SweepRow {
  int K = 0;
  int S = 0;
  int trials = 0;
  int successes = 0;         ///< recall and blank span both correct
  int recall_successes = 0;  ///< recall steps only

  double rate() const { return trials ? static_cast<double>(successes) / trials : 0.0; }
  double recall_rate() const {
    return trials ? static_cast<double>(recall_successes) / trials : 0.0;
  }
};

/// Success rates of freshly built mechanisms on fresh samples over a (K, S) grid.
/// Each trial draws from its own substream of rng, so results are independent
/// of the worker count.
inline std::vector<SweepRow> success_sweep(int d, int T, std::span<const int> K_grid,
                                           std::span<const int> S_grid, int trials,
                                           const SeededRng& rng) {
  if (trials < 1) throw std::invalid_argument("success_sweep: trials must be >= 1");
  std::vector<SweepRow> rows;
  for (int K : K_grid) {
    for (int S : S_grid) {
      std::vector<CopyMechanismOutcome> outcomes(static_cast<std::size_t>(trials));
      const SeededRng point = rng.substream(static_cast<std::uint64_t>(T))
                                  .substream(static_cast<std::uint64_t>(K))
                                  .substream(static_cast<std::uint64_t>(S));
      parallel_for(outcomes.size(), [&](std::size_t i) {
        SeededRng trial_rng = point.substream(i);
        const ClockMechanism mech = build_copy_mechanism(d, K, S, T, trial_rng);
        const CopySample sample = gen_copy(CopyConfig{K, S, T, false}, trial_rng);
        outcomes[i] = evaluate_copy_mechanism(mech, sample);
      });
      SweepRow row{K, S, trials, 0, 0};
      for (const auto& o : outcomes) {
        row.successes += o.success() ? 1 : 0;
        row.recall_successes += o.recall ? 1 : 0;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

inline void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows, std::uint64_t seed) {
  os << "K,S,trials,successes,rate,seed,recall_successes,recall_rate\n";
  char buf[64];
  for (const auto& r : rows) {
    os << r.K << ',' << r.S << ',' << r.trials << ',' << r.successes << ',';
    std::snprintf(buf, sizeof buf, "%.6f", r.rate());
    os << buf << ',' << seed << ',' << r.recall_successes << ',';
    std::snprintf(buf, sizeof buf, "%.6f", r.recall_rate());
    os << buf << '\n';
  }
}

struct InterferenceEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  int trials = 0;
};

/// Monte Carlo mean of |u_1ᵀ Σ_{j=2..S} Q^{1−j} u_j|² with fresh clock phases
/// and independent unit vectors u_j in R^dim (dim/2 rotation blocks).
/// For any period > S its expectation is exactly (S−1)/dim.
inline InterferenceEstimate interference_stat(int dim, int S, int trials, SeededRng& rng,
                                              int period = 510) {
  if (S < 2) throw std::invalid_argument("interference_stat: S must be >= 2");
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("interference_stat: dim must be even");
  if (trials < 2) throw std::invalid_argument("interference_stat: need at least 2 trials");
  if (period <= S) throw std::invalid_argument("interference_stat: period must exceed S");
  const int blocks = dim / 2;
  double sum = 0.0, sum_sq = 0.0;
  std::vector<double> theta(static_cast<std::size_t>(blocks));
  for (int trial = 0; trial < trials; ++trial) {
    for (auto& th : theta) {
      th = 2.0 * std::numbers::pi * static_cast<double>(rng.uniform_int(1, period)) / period;
    }
    const auto u = sample_unit_sphere(static_cast<std::size_t>(dim), static_cast<std::size_t>(S), rng);
    double z = 0.0;
    for (int j = 2; j <= S; ++j) {
      // Each block of Q is a rotation by −θ_b, so Q^{1−j} rotates by (j−1)θ_b.
      const Vector& v = u[static_cast<std::size_t>(j - 1)];
      for (int b = 0; b < blocks; ++b) {
        const double a = (j - 1) * theta[static_cast<std::size_t>(b)];
        const double c = std::cos(a), s = std::sin(a);
        const double x = v(2 * b), y = v(2 * b + 1);
        z += u[0](2 * b) * (c * x - s * y) + u[0](2 * b + 1) * (s * x + c * y);
      }
    }
    const double z2 = z * z;
    sum += z2;
    sum_sq += z2 * z2;
  }
  InterferenceEstimate est;
  est.trials = trials;
  est.mean = sum / trials;
  const double var = (sum_sq - trials * est.mean * est.mean) / (trials - 1);
  est.std_error = std::sqrt(std::max(var, 0.0) / trials);
  return est;
}

/// One ReLU unit that adds the marked values: U = [1 1], b = −1, V = 1, W = 1.
/// An unmarked step contributes relu(x − 1) = 0 because x < 1; a marked step
/// contributes relu(x + 1 − 1) = x.
inline LtRnnParams build_adding_mechanism() {
  LtRnnParams p;
  p.U = Matrix::Ones(1, 2);
  p.V = Matrix::Ones(1, 1);
  p.b = Matrix::Constant(1, 1, -1.0);
  p.W = Matrix::Ones(1, 1);
  p.nonlinearity = Nonlinearity::relu;
  return p;
}

}  // namespace ornn
