#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace uqcal::metrics {

inline constexpr std::size_t kClassificationBins = 25;
inline constexpr std::size_t kCoverageLevels = 100;

struct BinStats {
  std::size_t bin_index = 0;
  std::size_t count = 0;
  double mean_confidence = 0.0;
  double precision = 0.0;
  double mean_location_quality = 0.0;
  double weight = 0.0;
};

/// Equal-width bins on [0, 1], left-closed/right-open with the last bin closed.
std::size_t bin_of(double score, std::size_t num_bins);

/// Per-bin occupancy, mean confidence, precision and location quality. Pass an
/// empty `distances` span to skip location quality.
std::vector<BinStats> reliability_bins(std::span<const double> scores, std::span<const std::uint8_t> is_tp,
                                       std::span<const double> distances, double tau, std::size_t num_bins);

/// Location quality 1 - min(d, tau) / tau for a TP, 0 for an FP.
double location_quality(bool is_tp, double distance, double tau);

double d_ece(std::span<const double> scores, std::span<const std::uint8_t> is_tp,
             std::size_t num_bins = kClassificationBins);

/// `distances` is indexed like `scores`; entries for FPs are ignored.
double la_ece(std::span<const double> scores, std::span<const std::uint8_t> is_tp, std::span<const double> distances,
              double tau = 2.0, std::size_t num_bins = kClassificationBins);

double la_ace(std::span<const double> scores, std::span<const std::uint8_t> is_tp, std::span<const double> distances,
              double tau = 2.0);

/// Nominal coverage levels at bin midpoints p_k = (k + 1/2) / B with the
/// matching centered standard-normal half-widths s(p) = Phi^-1(1/2 + p/2).
class CoverageGrid {
 public:
  explicit CoverageGrid(std::size_t num_levels = kCoverageLevels);

  std::size_t size() const { return levels_.size(); }
  const std::vector<double>& levels() const { return levels_; }
  const std::vector<double>& half_widths() const { return half_widths_; }

  /// Empirical coverage at every level for the given standardized residuals.
  std::vector<double> coverage(std::span<const double> standardized) const;

  /// Miscalibration area of standardized residuals (midpoint rule over the bins).
  double area(std::span<const double> standardized) const;

 private:
  std::vector<double> levels_;
  std::vector<double> half_widths_;
};

double mca(std::span<const double> mus, std::span<const double> sigmas, std::span<const double> targets,
           std::size_t num_levels = kCoverageLevels);

/// Angular MCA: residuals wrapped to [-pi, pi), scale sigma = kappa^(-1/2).
double mca_angular(std::span<const double> mus, std::span<const double> kappas, std::span<const double> targets,
                   std::size_t num_levels = kCoverageLevels);

struct CoveragePoint {
  double p = 0.0;
  double empirical_coverage = 0.0;
};

std::vector<CoveragePoint> coverage_curve(std::span<const double> mus, std::span<const double> sigmas,
                                          std::span<const double> targets, std::size_t num_levels = kCoverageLevels);

/// One-sample Kolmogorov-Smirnov statistic (scaled by 100) between squared
/// Mahalanobis distances of the targets and the chi-squared law.
double ks_realism(std::span<const Eigen::VectorXd> mus, std::span<const Eigen::MatrixXd> covs,
                  std::span<const Eigen::VectorXd> targets);

/// KS statistic (scaled by 100) of already computed squared Mahalanobis distances.
double ks_chi2_statistic(std::vector<double> squared_distances, double dof);

}  // namespace uqcal::metrics
