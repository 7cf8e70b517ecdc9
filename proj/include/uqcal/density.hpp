#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "uqcal/core.hpp"
#include "uqcal/flow.hpp"
#include "uqcal/gmm.hpp"
#include "uqcal/matching.hpp"

namespace uqcal::density {

inline constexpr int kFormatVersion = 1;
/// Map key used for statistics pooled over all classes.
inline constexpr int kGlobalKey = -1;

enum class EstimatorKind { flow, gmm };

struct DensityConfig {
  EstimatorKind kind = EstimatorKind::flow;
  FlowConfig flow{};
  GmmConfig gmm{};
  std::size_t min_samples_per_class = 32;
  double low_quantile = 0.001;
  double high_quantile = 0.999;
  /// Score queries with the density of their predicted class instead of the
  /// prior-weighted marginal over classes.
  bool class_conditional = false;
  double match_threshold = kDefaultMatchThreshold;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

using Estimator = std::variant<FlowModel, GmmModel>;

struct QuantileRange {
  double low = 0.0;
  double high = 1.0;
};

struct StandardizationStats {
  double mean = 0.0;
  double stddev = 1.0;
};

double estimator_log_density(const Estimator& estimator, const Eigen::VectorXd& x);

/// Class-conditional feature densities with empirical priors, per-class
/// normalization quantiles and calibration-set standardization statistics.
/// Classes without training samples have no estimator; their quantiles and
/// statistics fall back to the pooled (kGlobalKey) entries.
struct DensityModel {
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;
  bool class_conditional = false;
  std::map<int, Estimator> estimators;
  std::map<int, double> log_priors;
  std::map<int, QuantileRange> quantiles;
  std::map<int, StandardizationStats> calib_stats;

  double class_log_density(int class_id, const Eigen::VectorXd& z) const;
  /// log sum_c exp(log q_c(z) + log prior_c)
  double marginal_log_density(const Eigen::VectorXd& z) const;
  /// The log-density used for scoring a query predicted as class_id.
  double query_log_density(int class_id, const Eigen::VectorXd& z) const;

  /// clip((log_q - Q_low) / (Q_high - Q_low), 0, 1); 0.5 with a warning on a zero-width range.
  double normalize(int class_id, double log_q) const;
  /// (normalized - mean) / stddev; 0 with a warning when stddev is 0.
  double standardize(int class_id, double normalized) const;

  const QuantileRange& quantile_range(int class_id) const;
  const StandardizationStats& stats(int class_id) const;
};

/// Features of detections matched as TP, grouped by class.
std::map<int, std::vector<Eigen::VectorXd>> true_positive_features(const Dataset& dataset, double tau,
                                                                   std::size_t workers = 1);

/// Fits one estimator per class on the TP query features of the training
/// split. Classes with fewer than min_samples_per_class samples get a single
/// Gaussian with a warning.
DensityModel fit_density(const Dataset& train, const DensityConfig& config);

/// Same, from features already grouped by class.
DensityModel fit_density(const std::map<int, std::vector<Eigen::VectorXd>>& features_by_class,
                         std::size_t num_classes, const DensityConfig& config);

/// Normalized log-densities for every detection of a dataset.
std::vector<double> normalized_log_densities(const DensityModel& model, const Dataset& dataset,
                                             std::size_t workers = 1);

/// Sets per-class and pooled mean / population stddev of normalized
/// log-densities from a calibration split.
void set_calibration_stats(DensityModel& model, const Dataset& calibration, std::size_t workers = 1);

/// z_dens for every detection of a dataset.
std::vector<double> compute_z_dens(const DensityModel& model, const Dataset& dataset, std::size_t workers = 1);

std::string to_json(const DensityModel& model);
DensityModel density_from_json(const std::string& text);
void save_density(const DensityModel& model, const std::filesystem::path& path);
DensityModel load_density(const std::filesystem::path& path);

}  // namespace uqcal::density
