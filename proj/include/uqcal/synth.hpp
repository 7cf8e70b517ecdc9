#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "uqcal/core.hpp"
#include "uqcal/matching.hpp"

namespace uqcal::synth {

inline constexpr std::size_t kNumSeverities = 4;

enum class Role { train = 0, calib = 1, test = 2 };

std::string to_string(Role role);

/// Generator settings. Features of class c are N(mu_c, feature_scale^2 I),
/// shifted at severity s along a fixed unit direction by a magnitude chosen so
/// that the standardized squared distance to mu_c,
///   a = (|f - mu_c|^2 / feature_scale^2 - D) / sqrt(2 D),
/// grows by feature_shift[s] on average. With a+ = max(a, 0) a detection is
/// a true positive with probability
///   sigmoid(logit / (T*_c (1 + atypicality_temperature_gain a+)) - atypicality_logit_offset a+),
/// and its residual scales are noise_scale * sqrt(h) * residual_inflation[s] *
/// (1 + atypicality_residual_gain a+) with h lognormal. Predicted variances are
/// inflation * noise_scale^2 * h (the yaw concentration is the reciprocal).
struct SynthConfig {
  std::size_t num_classes = 4;
  std::size_t feature_dim = kDefaultFeatureDim;
  std::size_t train_frames = 400;
  std::size_t calib_frames = 200;
  std::size_t test_frames = 300;
  double objects_per_frame = 10.0;  // Poisson mean
  std::vector<double> class_weights;  // empty: uniform
  double feature_scale = 1.0;
  double class_separation = 3.0;  // std of class-mean entries, in units of feature_scale
  double background_scale = 3.0;  // clutter features ~ N(0, (background_scale * feature_scale)^2 I)
  double clutter_fraction = 0.3;  // share of FP detections carrying background features
  double logit_mean = 0.5;
  double logit_std = 2.5;
  std::vector<double> temperature;  // T* per class; empty: 1
  std::array<double, kNumRegressionTargets> inflation{1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0};  // rho* per target
  std::array<double, kNumRegressionTargets> noise_scale{0.25, 0.25, 0.15, 0.2, 0.1, 0.1, 0.15};
  double heteroscedastic_spread = 0.3;  // std of log h
  std::array<double, kNumSeverities> feature_shift{0.0, 1.0, 2.0, 3.0};
  std::array<double, kNumSeverities> residual_inflation{1.0, 1.1, 1.2, 1.3};
  double atypicality_temperature_gain = 0.0;
  double atypicality_logit_offset = 0.0;
  double atypicality_residual_gain = 0.0;
  double scene_extent = 50.0;    // objects lie in [-extent, extent]^2
  double min_separation = 5.0;   // between ground truths of a frame
  double match_threshold = kDefaultMatchThreshold;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

/// Planted quantities of a generated split.
struct SynthTruth {
  std::uint64_t seed = 0;
  Role role = Role::train;
  std::size_t severity = 0;
  std::vector<double> temperature;
  std::array<double, kNumRegressionTargets> inflation{};
  std::array<double, kNumSeverities> feature_shift{};
  std::array<double, kNumSeverities> shift_magnitude{};
  std::array<double, kNumSeverities> residual_inflation{};
  std::vector<Eigen::VectorXd> class_means;
  Eigen::VectorXd shift_direction;
  double feature_scale = 1.0;
  std::vector<std::uint8_t> planted_tp;    // per detection
  std::vector<double> atypicality;         // per detection, a (not clipped)
};

struct SynthSplit {
  Dataset dataset;
  SynthTruth truth;
};

/// Validates the configuration; throws ConfigError.
void validate(const SynthConfig& config);

std::vector<std::string> default_class_names(std::size_t num_classes);

/// One split; deterministic in (config, role, severity) and independent of
/// the worker count.
SynthSplit generate_split(const SynthConfig& config, Role role, std::size_t severity);

/// Draw from a von Mises distribution centered at 0 (Best-Fisher).
double sample_von_mises(double kappa, std::mt19937_64& rng);

std::string truth_json(const SynthTruth& truth);

struct SynthOutput {
  std::filesystem::path train_prefix;
  std::filesystem::path val_prefix;
  std::filesystem::path truth_path;
  std::size_t train_detections = 0;
  std::size_t val_detections = 0;
};

/// Writes train.{det,gt}.jsonl, val.{det,gt}.jsonl (calibration-role frames
/// followed by test-role frames) and truth.json into `dir`.
SynthOutput write_synthetic(const SynthConfig& config, std::size_t calib_severity, std::size_t test_severity,
                            const std::filesystem::path& dir);

}  // namespace uqcal::synth
