#pragma once

#include <array>

namespace uqcal::losses {

struct YawLossConfig {
  double lambda_v = 0.1;  // strength of the ELU penalty on the yaw log-variance
  double s0 = 3.0;        // ELU offset
};

/// Loss value with gradients w.r.t. the prediction and the log-variances.
struct TripleLoss {
  double value = 0.0;
  std::array<double, 3> d_pred{};
  std::array<double, 3> d_log_var{};
};

struct YawLoss {
  double value = 0.0;
  double d_pred = 0.0;
  double d_log_var = 0.0;
};

/// 1/2 sum_i [(pred_i - target_i)^2 exp(-u_i) + u_i]
TripleLoss loss_center(const std::array<double, 3>& pred, const std::array<double, 3>& target,
                       const std::array<double, 3>& log_var);

/// Same form with log-space sizes exponentiated before the residual.
/// Throws NumericError when an exponential overflows.
TripleLoss loss_size(const std::array<double, 3>& pred_log, const std::array<double, 3>& target_log,
                     const std::array<double, 3>& log_var);

/// Von-Mises KL loss log I0(k) + k (1 - cos(pred - target)) + lambda_v ELU(u - s0), k = exp(-u).
YawLoss loss_yaw(double pred, double target, double log_var, const YawLossConfig& config = {});

/// log I0(x) for x >= 0, evaluated without forming I0 itself. Throws
/// ValidationError for negative x.
double log_bessel_i0(double x);

/// I1(x) / I0(x) for x >= 0 (derivative of log I0).
double bessel_i1_i0_ratio(double x);

double elu(double x);

}  // namespace uqcal::losses
