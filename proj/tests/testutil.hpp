#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "lbd/matrix.hpp"

namespace lbd::testutil {

// Central finite differences, the independent oracle for every analytic
// gradient in the library. step 1e-6 balances truncation and roundoff for
// the loss magnitudes used in these tests.
inline std::vector<double> finite_difference(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> at, double step = 1e-6) {
  std::vector<double> x(at.begin(), at.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double hi = f(x);
    x[i] = keep - step;
    const double lo = f(x);
    x[i] = keep;
    grad[i] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline double max_rel_error(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, rel_error(a[i], b[i]));
  }
  return worst;
}

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
  double se = 0.0;
};

inline MeanSd mean_sd(std::span<const double> xs) {
  MeanSd r;
  const double n = static_cast<double>(xs.size());
  for (double v : xs) r.mean += v;
  r.mean /= n;
  double ss = 0.0;
  for (double v : xs) ss += (v - r.mean) * (v - r.mean);
  r.sd = std::sqrt(ss / (n - 1.0));
  r.se = r.sd / std::sqrt(n);
  return r;
}

// Chi-square statistic for observed {zeros, ones} against Bernoulli(p).
inline double chi_square_binary(std::size_t ones, std::size_t total, double p) {
  const double e1 = p * static_cast<double>(total);
  const double e0 = (1.0 - p) * static_cast<double>(total);
  const double o1 = static_cast<double>(ones);
  const double o0 = static_cast<double>(total - ones);
  return (o1 - e1) * (o1 - e1) / e1 + (o0 - e0) * (o0 - e0) / e0;
}

}  // namespace lbd::testutil
