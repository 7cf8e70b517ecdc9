#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace uqcal {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

/// Wraps an angle to [-pi, pi).
inline double wrap_angle(double theta) {
  double r = std::fmod(theta + kPi, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  double out = r - kPi;
  // fmod can land exactly on +pi after the shift for inputs like -pi - eps
  if (out >= kPi) out -= kTwoPi;
  return out;
}

/// Standard normal CDF.
double normal_cdf(double x);

/// Standard normal quantile; returns -inf/+inf at p = 0/1.
double normal_quantile(double p);

/// CDF of the chi-squared law with `dof` degrees of freedom.
double chi2_cdf(double x, double dof);

/// log(sum(exp(v))) with the max shift; -inf for empty input or all -inf.
double log_sum_exp(std::span<const double> values);

/// Linearly interpolated empirical quantile (the "type 7" rule). `sorted` must be ascending.
double sorted_quantile(std::span<const double> sorted, double q);

double mean(std::span<const double> values);

/// Population (ddof = 0) standard deviation.
double population_stddev(std::span<const double> values);

}  // namespace uqcal
