#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "uqcal/optim.hpp"

namespace uqcal::density {

/// log N(x; 0, I)
double base_log_density(const Eigen::VectorXd& x);
/// log N(x; mean, diag(var))
double base_log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, const Eigen::VectorXd& var);

struct FlowConfig {
  std::size_t num_blocks = 32;
  std::size_t hidden = 32;
  double scale_bound = 2.0;
  bool standardize_inputs = true;  // fixed per-dimension affine pre-layer fitted from the data
  optim::AdamConfig adam{};
  std::uint64_t seed = 0;
};

enum class Direction { forward, inverse };

/// RealNVP-style stack of affine coupling blocks over R^D with a fixed
/// standard normal base. Block b transforms the second half of the
/// coordinates when b is even and the first half when b is odd, which is the
/// swap permutation between consecutive blocks. Each block holds a scale net
/// and a shift net (D/2 -> hidden -> D/2, tanh hidden units); the scale is
/// scale_bound * tanh(raw). Output layers start at zero.
class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(std::size_t dim, std::size_t num_blocks, std::size_t hidden, double scale_bound);

  std::size_t dim() const { return dim_; }
  std::size_t num_blocks() const { return num_blocks_; }
  std::size_t hidden() const { return hidden_; }
  double scale_bound() const { return scale_bound_; }

  /// Random hidden-layer weights, uniform in +-1/sqrt(fan_in); output layers untouched.
  void initialize_hidden(std::uint64_t seed);

  std::vector<double>& parameters() { return params_; }
  const std::vector<double>& parameters() const { return params_; }
  std::size_t parameters_per_block() const;

  /// x -> (x - input_shift) / input_scale applied before the first block.
  const Eigen::VectorXd& input_shift() const { return shift_; }
  const Eigen::VectorXd& input_scale() const { return scale_; }
  void set_input_standardization(Eigen::VectorXd shift, Eigen::VectorXd scale);

  /// Blocks only (no input standardization). Forward maps data to latent and
  /// accumulates log|det J|; inverse undoes it and returns the negated log-det.
  Eigen::VectorXd transform(const Eigen::VectorXd& x, Direction direction, double* log_det = nullptr) const;

  /// Columns are samples. Returns log-densities including the pre-layer.
  /// Throws NumericError naming the block when an intermediate is non-finite.
  Eigen::VectorXd log_density(const Eigen::MatrixXd& samples) const;
  double log_density(const Eigen::VectorXd& x) const;

  /// Mean negative log-likelihood of the given (already standardized) columns
  /// under the block stack with its gradient w.r.t. parameters() added to grad.
  double nll_and_gradient(std::span<const double> params, const Eigen::MatrixXd& standardized,
                          std::span<double> grad) const;

  Eigen::MatrixXd standardize(const Eigen::MatrixXd& samples) const;

 private:
  std::size_t dim_ = 0;
  std::size_t num_blocks_ = 0;
  std::size_t hidden_ = 0;
  double scale_bound_ = 2.0;
  std::vector<double> params_;
  Eigen::VectorXd shift_;
  Eigen::VectorXd scale_;
};

/// Maximum-likelihood training by mini-batch Adam with linear decay.
/// Throws ConfigError for odd D or no samples.
FlowModel fit_flow(std::span<const Eigen::VectorXd> features, const FlowConfig& config,
                   optim::AdamTrace* trace = nullptr);

}  // namespace uqcal::density
