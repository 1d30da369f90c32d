#pragma once

// Statistical helpers shared by the unit and acceptance suites.  They are
// independent of the library code they are used to check.

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

namespace ornn::testing {

/// Asymptotic Kolmogorov survival function Q(λ) = 2 Σ (−1)^{k−1} exp(−2 k² λ²).
inline double kolmogorov_survival(double lambda) {
  if (lambda < 1e-3) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1 ? 1.0 : -1.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

/// One-sample KS test of xs against Uniform[lo, hi]; returns the p-value.
inline double ks_uniform_pvalue(std::vector<double> xs, double lo, double hi) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = std::clamp((xs[i] - lo) / (hi - lo), 0.0, 1.0);
    d = std::max({d, (i + 1) / n - f, f - i / n});
  }
  const double sn = std::sqrt(n);
  return kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d);
}

/// Pearson chi-square goodness-of-fit p-value against equal expected counts.
inline double chi_square_uniform_pvalue(const std::vector<long>& counts) {
  long total = 0;
  for (long c : counts) total += c;
  const double expected = static_cast<double>(total) / counts.size();
  double stat = 0.0;
  for (long c : counts) stat += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

/// Binomial standard error of a rate estimated from n trials (floored at one
/// pseudo-count so that rates of exactly 0 or 1 keep a nonzero spread).
inline double binomial_se(double rate, int n) {
  const double p = std::clamp(rate, 0.5 / n, 1.0 - 0.5 / n);
  return std::sqrt(p * (1.0 - p) / n);
}

}  // namespace ornn::testing
