#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "uqcal/core.hpp"
#include "uqcal/matching.hpp"

namespace uqcal::calib {

inline constexpr int kFormatVersion = 1;
inline constexpr int kGlobalKey = -1;
inline constexpr double kProbabilityClamp = 1e-7;
inline constexpr double kVarianceFloor = 1e-8;
inline constexpr double kDefaultClassificationGamma = 0.2;
inline constexpr double kDefaultRegressionGamma = 0.15;
inline constexpr std::size_t kMinRegressionSamples = 50;

/// 1 + gamma * tanh(x), bounded to [1 - gamma, 1 + gamma].
double gain(double gamma, double x);

struct TemperatureParams {
  double temperature = 1.0;
};

struct DaTemperatureParams {
  double temperature = 1.0;
  double s_t = 0.0;
};

struct PlattParams {
  double slope = 1.0;
  double shift = 0.0;
};

struct DaPlattParams {
  double slope = 1.0;
  double shift = 0.0;
  double s_scale = 0.0;
  double s_shift = 0.0;
};

/// Non-decreasing right-continuous step function. Inputs below the first knot
/// take the first value, inputs above the last knot the last value.
struct IsotonicStep {
  std::vector<double> knots;
  std::vector<double> values;

  bool fitted() const { return !knots.empty(); }
  double operator()(double u) const;
};

/// IR and DA-IR: the step function is fitted on u = w_s p + w_d z_dens + bias.
/// Plain IR uses w_s = 1, w_d = 0, bias = 0.
struct IsotonicParams {
  double w_s = 1.0;
  double w_d = 0.0;
  double bias = 0.0;
  IsotonicStep step;
};

/// Depth baseline: value(d) = a d + b.
struct DepthParams {
  double a = 0.0;
  double b = 1.0;
};

struct RegTsParams {
  double temperature = 1.0;
};

struct RegDaTsParams {
  double s = 1.0;
  double b = 0.0;
  double s_sigma = 0.0;
};

double apply_ts(const TemperatureParams& p, double logit);
double apply_da_ts(const DaTemperatureParams& p, double gamma, double logit, double z_dens);
double apply_ps(const PlattParams& p, double logit);
double apply_da_ps(const DaPlattParams& p, double gamma, double logit, double z_dens);

/// Weighted least-squares non-decreasing fit (pool adjacent violators).
std::vector<double> pava(std::span<const double> values, std::span<const double> weights);

/// Isotonic fit of labels against inputs; equal inputs share one knot.
IsotonicStep fit_isotonic(std::span<const double> inputs, std::span<const double> labels);

/// Throws ConfigError when the step function is not fitted.
double apply_ir(const IsotonicParams& p, double score);
double apply_da_ir(const IsotonicParams& p, double score, double z_dens);

/// variance / T (the yaw concentration is divided the same way).
double apply_reg_ts(const RegTsParams& p, double variance);
/// a d + b floored at kVarianceFloor.
double apply_reg_depth(const DepthParams& p, double depth);
/// (s variance + b) * gain(gamma, s_sigma z_dens) floored at kVarianceFloor.
double apply_reg_da_ts(const RegDaTsParams& p, double gamma, double variance, double z_dens);

/// How often an output was raised to kVarianceFloor in this process.
std::size_t variance_floor_count();

enum class ClsMethod { identity, ts, ps, ir, da_ts, da_ps, da_ir };
enum class RegMethod { identity, ts, da_ts, depth };
enum class Scope { global, class_wise };

std::string to_string(ClsMethod m);
std::string to_string(RegMethod m);
std::string to_string(Scope s);
/// Accepts the names produced by to_string ("da-ts", "class", ...). Throws ConfigError otherwise.
ClsMethod parse_cls_method(const std::string& name);
RegMethod parse_reg_method(const std::string& name);
Scope parse_scope(const std::string& name);

struct Identity {};

using ClsParams = std::variant<Identity, TemperatureParams, DaTemperatureParams, PlattParams, DaPlattParams,
                               IsotonicParams>;
using RegParams = std::variant<Identity, RegTsParams, RegDaTsParams, DepthParams>;
using RegTargetParams = std::array<RegParams, kNumRegressionTargets>;

struct ClassificationCalibrator {
  ClsMethod method = ClsMethod::identity;
  Scope scope = Scope::global;
  double gamma = kDefaultClassificationGamma;
  std::map<int, ClsParams> params;  // kGlobalKey for global scope

  /// Parameters used for a class (identity when none were fitted).
  const ClsParams& params_for(int class_id) const;
  /// Calibrated probability in [kProbabilityClamp, 1 - kProbabilityClamp] for
  /// isotonic methods and in (0, 1) otherwise.
  double probability(int class_id, double logit, double score, double z_dens) const;
  /// Logit of the calibrated probability, computed without passing through it where possible.
  double calibrated_logit(int class_id, double logit, double score, double z_dens) const;
};

struct RegressionCalibrator {
  RegMethod method = RegMethod::identity;
  Scope scope = Scope::global;
  double gamma = kDefaultRegressionGamma;
  std::map<int, RegTargetParams> params;

  const RegTargetParams* params_for(int class_id) const;
  /// Calibrated variance (targets 0-5) or concentration (target 6).
  double value(int class_id, std::size_t target, double value, double depth, double z_dens) const;
  ProbabilisticBox apply(const DetectionRecord& det, double z_dens) const;
};

struct ClassificationSample {
  int class_id = 0;
  double logit = 0.0;
  double score = 0.5;
  double z_dens = 0.0;
  bool is_tp = false;
};

/// One TP: predictions, targets and predicted variances (concentration for yaw).
struct RegressionSample {
  int class_id = 0;
  double depth = 0.0;
  double z_dens = 0.0;
  std::array<double, kNumRegressionTargets> predicted{};
  std::array<double, kNumRegressionTargets> target{};
  std::array<double, kNumRegressionTargets> value{};
};

/// `matches` are match_dataset results over the same dataset; `z_dens` is
/// indexed by detection (empty means 0 everywhere).
std::vector<ClassificationSample> classification_samples(const Dataset& dataset, std::span<const MatchResult> matches,
                                                         std::span<const double> z_dens);
std::vector<RegressionSample> regression_samples(const Dataset& dataset, std::span<const MatchResult> matches,
                                                 std::span<const double> z_dens);

struct Bounds {
  std::pair<double, double> temperature{0.05, 20.0};
  std::pair<double, double> slope{0.05, 20.0};
  std::pair<double, double> shift{-10.0, 10.0};
  std::pair<double, double> density_scale{-5.0, 5.0};  // s_T, s_scale, s_shift, s_sigma
  std::pair<double, double> reg_scale{0.05, 20.0};
  std::pair<double, double> reg_bias{0.0, 10.0};
  std::pair<double, double> ir_weight{-5.0, 5.0};  // w_s, w_d and the bias
};

struct FitConfig {
  Scope scope = Scope::global;
  double gamma = kDefaultClassificationGamma;
  std::size_t num_classes = 0;  // class-wise scope fits classes [0, num_classes)
  std::size_t max_evaluations = 20000;
  std::size_t population_factor = 15;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t min_regression_samples = kMinRegressionSamples;
  Bounds bounds{};
};

/// Minimizes the mean binary NLL of the calibrated probabilities. Classes
/// (or a global cell) without samples receive the identity with a warning.
ClassificationCalibrator fit_classification(std::span<const ClassificationSample> samples, ClsMethod method,
                                            const FitConfig& config);

/// Per target, minimizes the MCA (angular for yaw) of the calibrated
/// uncertainties. Cells with fewer than min_regression_samples TPs keep the
/// identity with a warning.
RegressionCalibrator fit_regression(std::span<const RegressionSample> samples, RegMethod method,
                                    const FitConfig& config);

/// Mean binary NLL with probabilities clamped to [1e-7, 1 - 1e-7].
double binary_nll(std::span<const double> probabilities, std::span<const ClassificationSample> samples);

/// Applies calibrators to every detection; either may be null.
Dataset apply_calibration(const Dataset& dataset, std::span<const double> z_dens,
                          const ClassificationCalibrator* classification, const RegressionCalibrator* regression);

std::string to_json(const ClassificationCalibrator& c);
std::string to_json(const RegressionCalibrator& c);
ClassificationCalibrator classification_from_json(const std::string& text);
RegressionCalibrator regression_from_json(const std::string& text);

/// Calibrator artifact holding either or both calibrators.
struct CalibratorBundle {
  std::optional<ClassificationCalibrator> classification;
  std::optional<RegressionCalibrator> regression;
};
void save_calibrators(const CalibratorBundle& bundle, const std::filesystem::path& path);
CalibratorBundle load_calibrators(const std::filesystem::path& path);

}  // namespace uqcal::calib
