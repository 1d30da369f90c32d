#pragma once

// Dense linear algebra, orthogonality tools and the seeded random generator
// shared by every other part of the library.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ornn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Raised when a computation produces NaN/Inf or cannot continue numerically.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// SeededRng
//
// xoshiro256** seeded through splitmix64 from the pair (seed, stream).  The
// distributions below are written out explicitly instead of going through
// <random>, whose distribution algorithms are implementation-defined; this
// keeps every draw sequence bit-identical across standard libraries.
// ---------------------------------------------------------------------------
class SeededRng {
 public:
  SeededRng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {
    std::uint64_t sm = seed ^ (mix(stream + 0x632BE59BD9B4E019ULL) * 0x9E3779B97F4A7C15ULL);
    for (auto& word : state_) word = splitmix(sm);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  /// A generator for a derived stream; (seed, stream, sub) triples are independent.
  SeededRng substream(std::uint64_t sub) const {
    return SeededRng(seed_, mix(stream_ * 0xD1B54A32D192ED03ULL + sub + 1));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer on [lo, hi], unbiased (rejection sampling).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(next_u64());
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % span;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + static_cast<std::int64_t>(x % span);
  }

  /// Standard normal via the Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = stddev * normal();
    return m;
  }

  Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = lo + (hi - lo) * uniform();
    return m;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static std::uint64_t splitmix(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    return mix(x);
  }
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::array<std::uint64_t, 4> state_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Products and checks
// ---------------------------------------------------------------------------

/// Dense product with an explicit shape check (matrix-vector is cols == 1).
inline Matrix gemm(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("gemm: dimension mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " times " + std::to_string(b.rows()) +
                                "x" + std::to_string(b.cols()) + ")");
  }
  return a * b;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// max_ij |(MᵀM - I)_ij|
inline double orthogonality_error(const Matrix& m) {
  const Matrix g = m.transpose() * m;
  return (g - Matrix::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff();
}

/// Block-diagonal "clock" matrix: one 2x2 rotation block per phase, each block
///   [ cos θ   sin θ ]
///   [-sin θ   cos θ ]   with θ = 2·l·π / period.
/// All blocks return to the identity after `period` applications.
inline Matrix block_rotation(std::span<const std::int64_t> phases, std::int64_t period) {
  if (phases.empty()) throw std::invalid_argument("block_rotation: empty phase list");
  if (period < 1) throw std::invalid_argument("block_rotation: period must be >= 1");
  const auto blocks = static_cast<Eigen::Index>(phases.size());
  Matrix q = Matrix::Zero(2 * blocks, 2 * blocks);
  for (Eigen::Index j = 0; j < blocks; ++j) {
    const std::int64_t l = phases[static_cast<std::size_t>(j)];
    if (l < 1 || l > period) {
      throw std::invalid_argument("block_rotation: phase " + std::to_string(l) +
                                  " outside {1,...," + std::to_string(period) + "}");
    }
    // Reduce l mod period first so that l == period is an exact identity block.
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(l % period) /
                         static_cast<double>(period);
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    q(2 * j, 2 * j) = c;
    q(2 * j, 2 * j + 1) = s;
    q(2 * j + 1, 2 * j) = -s;
    q(2 * j + 1, 2 * j + 1) = c;
  }
  return q;
}

/// Power-iteration estimate of the largest singular value (iterates on MᵀM).
inline double spectral_norm(const Matrix& m, int iters = 100) {
  if (m.rows() != m.cols()) throw std::invalid_argument("spectral_norm: matrix must be square");
  if (iters < 30) throw std::invalid_argument("spectral_norm: need at least 30 iterations");
  if (m.size() == 0) return 0.0;
  // Fixed start vector so the estimate is a deterministic function of m.
  SeededRng rng(0x5EC7A1ULL, 0);
  Vector v(m.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
  v.normalize();
  for (int k = 0; k < iters; ++k) {
    const Vector w = m.transpose() * (m * v);
    const double n = w.norm();
    if (n == 0.0) return 0.0;
    v = w / n;
  }
  return (m * v).norm();
}

/// Orthogonal polar factor of a square full-rank matrix (all singular values
/// set to 1), by Newton-Schulz iteration X ← X(3I − XᵀX)/2 after scaling the
/// input below unit spectral norm.
inline Matrix nearest_orthogonal(const Matrix& m, double tol = 1e-12, int max_iters = 120) {
  if (m.rows() != m.cols()) throw std::invalid_argument("nearest_orthogonal: matrix must be square");
  if (!m.allFinite()) throw NumericalError("nearest_orthogonal: non-finite input");
  const Eigen::Index n = m.rows();
  const auto rank_deficient = [] {
    return std::domain_error("nearest_orthogonal: rank-deficient input, projection is not unique");
  };
  const double sigma = spectral_norm(m, 60);
  if (sigma == 0.0) throw rank_deficient();
  // The power iteration approaches sigma_max from below; the margin keeps the
  // scaled spectrum inside the Newton-Schulz convergence region (0, sqrt 3).
  Matrix x = m / (1.05 * sigma);
  const Matrix eye = Matrix::Identity(n, n);
  bool converged = false;
  for (int k = 0; k < max_iters; ++k) {
    const Matrix gram = x.transpose() * x;
    const double err = (gram - eye).cwiseAbs().maxCoeff();
    if (err < tol) {
      converged = true;
      break;
    }
    if (!std::isfinite(err) || err > 1e6) break;
    x = 0.5 * x * (3.0 * eye - gram);
  }
  if (!converged) throw rank_deficient();
  // Round-off can seed a null direction that the iteration then inflates to a
  // spurious orthogonal completion. The symmetric factor OᵀM = (MᵀM)^(1/2)
  // exposes that: its eigenvalues are the singular values of m.
  Matrix h = x.transpose() * m;
  h = 0.5 * (h + h.transpose()).eval();
  Eigen::LLT<Matrix> llt(h - 1e-10 * eye);
  if (llt.info() != Eigen::Success) throw rank_deficient();
  return x;
}

/// n Gaussian draws in R^dim, each normalized to unit length.
inline std::vector<Vector> sample_unit_sphere(std::size_t dim, std::size_t n, SeededRng& rng) {
  if (dim == 0) throw std::invalid_argument("sample_unit_sphere: dim must be >= 1");
  std::vector<Vector> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vector v(static_cast<Eigen::Index>(dim));
    double norm = 0.0;
    do {
      for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = rng.normal();
      norm = v.norm();
    } while (norm == 0.0);
    out.push_back(v / norm);
  }
  return out;
}

}  // namespace ornn
