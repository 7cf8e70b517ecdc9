#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace uqcal::density {

inline constexpr double kCovarianceFloor = 1e-6;

struct GmmConfig {
  std::size_t components = 8;
  bool diagonal = true;
  double covariance_floor = kCovarianceFloor;
  double tolerance = 1e-6;  // on the mean per-sample log-likelihood
  std::size_t max_iterations = 200;
  std::uint64_t seed = 0;
};

struct GmmFitInfo {
  std::vector<double> log_likelihood;  // mean per-sample value after each E-step
  std::size_t iterations = 0;
  bool converged = false;
};

/// Gaussian mixture with diagonal or full covariances.
class GmmModel {
 public:
  GmmModel() = default;
  /// Diagonal model: variances[k] holds the diagonal of component k.
  GmmModel(std::vector<double> weights, std::vector<Eigen::VectorXd> means, std::vector<Eigen::VectorXd> variances);
  /// Full model.
  GmmModel(std::vector<double> weights, std::vector<Eigen::VectorXd> means, std::vector<Eigen::MatrixXd> covariances);

  bool diagonal() const { return diagonal_; }
  std::size_t components() const { return weights_.size(); }
  std::size_t dim() const { return means_.empty() ? 0 : static_cast<std::size_t>(means_.front().size()); }
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<Eigen::VectorXd>& means() const { return means_; }
  const std::vector<Eigen::VectorXd>& variances() const { return variances_; }
  const std::vector<Eigen::MatrixXd>& covariances() const { return covariances_; }

  /// log N(x; mean_k, cov_k) for every component.
  Eigen::VectorXd component_log_densities(const Eigen::VectorXd& x) const;
  double log_density(const Eigen::VectorXd& x) const;

 private:
  void prepare();

  bool diagonal_ = true;
  std::vector<double> weights_;
  std::vector<double> log_weights_;
  std::vector<Eigen::VectorXd> means_;
  std::vector<Eigen::VectorXd> variances_;
  std::vector<Eigen::MatrixXd> covariances_;
  std::vector<Eigen::MatrixXd> cholesky_;
  std::vector<double> log_norm_;  // -D/2 log 2pi - 1/2 log det
};

/// EM with k-means++ seeding. Throws ConfigError when there are fewer samples
/// than components.
GmmModel fit_gmm(std::span<const Eigen::VectorXd> features, const GmmConfig& config, GmmFitInfo* info = nullptr);

}  // namespace uqcal::density
