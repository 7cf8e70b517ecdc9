#include "uqcal/losses.hpp"

#include <cmath>
#include <string>

#include "uqcal/errors.hpp"
#include "uqcal/math.hpp"

namespace uqcal::losses {
namespace {

// Below this the ascending series is used; above it the large-argument
// expansion reaches double precision (its smallest term at 30 is ~1e-26).
constexpr double kSeriesLimit = 30.0;

// sum_k (x^2/4)^k / (k! (k + nu)!) for nu in {0, 1}, without the (x/2)^nu factor.
double ascending_series(double x, int nu) {
  const double q = 0.25 * x * x;
  double term = nu == 0 ? 1.0 : 1.0;
  double sum = term;
  for (int k = 1; k < 500; ++k) {
    term *= q / (static_cast<double>(k) * static_cast<double>(k + nu));
    sum += term;
    if (term < 1e-17 * sum) break;
  }
  return sum;
}

// sum_k c_k(nu) / x^k of the expansion I_nu(x) ~ e^x / sqrt(2 pi x) * sum.
double asymptotic_series(double x, int nu) {
  const double mu = 4.0 * nu * nu;
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k < 200; ++k) {
    const double odd = 2.0 * k - 1.0;
    const double next = term * -(mu - odd * odd) / (static_cast<double>(k) * 8.0 * x);
    if (std::abs(next) >= std::abs(term)) break;
    term = next;
    sum += term;
    if (std::abs(term) < 1e-17 * std::abs(sum)) break;
  }
  return sum;
}

}  // namespace

double log_bessel_i0(double x) {
  if (!(x >= 0.0)) throw ValidationError("log_bessel_i0: argument must be >= 0");
  if (x < kSeriesLimit) return std::log(ascending_series(x, 0));
  return x - 0.5 * std::log(kTwoPi * x) + std::log(asymptotic_series(x, 0));
}

double bessel_i1_i0_ratio(double x) {
  if (!(x >= 0.0)) throw ValidationError("bessel_i1_i0_ratio: argument must be >= 0");
  if (x < kSeriesLimit) return 0.5 * x * ascending_series(x, 1) / ascending_series(x, 0);
  return asymptotic_series(x, 1) / asymptotic_series(x, 0);
}

double elu(double x) { return x > 0.0 ? x : std::expm1(x); }

TripleLoss loss_center(const std::array<double, 3>& pred, const std::array<double, 3>& target,
                       const std::array<double, 3>& log_var) {
  TripleLoss out;
  for (std::size_t i = 0; i < 3; ++i) {
    const double r = pred[i] - target[i];
    const double precision = std::exp(-log_var[i]);
    out.value += 0.5 * (r * r * precision + log_var[i]);
    out.d_pred[i] = r * precision;
    out.d_log_var[i] = 0.5 * (1.0 - r * r * precision);
  }
  return out;
}

TripleLoss loss_size(const std::array<double, 3>& pred_log, const std::array<double, 3>& target_log,
                     const std::array<double, 3>& log_var) {
  TripleLoss out;
  for (std::size_t i = 0; i < 3; ++i) {
    const double a = std::exp(pred_log[i]);
    const double b = std::exp(target_log[i]);
    const double precision = std::exp(-log_var[i]);
    if (!std::isfinite(a) || !std::isfinite(b) || !std::isfinite(precision)) {
      throw NumericError("loss_size: exponential overflow in component " + std::to_string(i));
    }
    const double r = a - b;
    out.value += 0.5 * (r * r * precision + log_var[i]);
    out.d_pred[i] = r * precision * a;
    out.d_log_var[i] = 0.5 * (1.0 - r * r * precision);
  }
  return out;
}

YawLoss loss_yaw(double pred, double target, double log_var, const YawLossConfig& config) {
  if (config.lambda_v < 0.0) throw ConfigError("loss_yaw: lambda_v must be >= 0");
  const double kappa = std::exp(-log_var);
  const double delta = pred - target;
  const double shifted = log_var - config.s0;

  YawLoss out;
  out.value = log_bessel_i0(kappa) + kappa * (1.0 - std::cos(delta)) + config.lambda_v * elu(shifted);
  out.d_pred = kappa * std::sin(delta);
  // d/du of log I0(k) with k = exp(-u) is -k I1(k)/I0(k)
  out.d_log_var = -kappa * bessel_i1_i0_ratio(kappa) - kappa * (1.0 - std::cos(delta)) +
                  config.lambda_v * (shifted > 0.0 ? 1.0 : std::exp(shifted));
  return out;
}

}  // namespace uqcal::losses
