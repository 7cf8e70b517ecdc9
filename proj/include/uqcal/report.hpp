#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "uqcal/core.hpp"
#include "uqcal/matching.hpp"
#include "uqcal/metrics.hpp"

namespace uqcal::report {

/// 0.05, 0.10, ..., 0.60
std::vector<double> default_thresholds();

/// "start:stop:step" (inclusive stop) or a comma-separated list. Throws
/// ConfigError when empty or not strictly ascending.
std::vector<double> parse_thresholds(const std::string& text);

struct ReportConfig {
  std::vector<double> thresholds = default_thresholds();
  std::size_t classification_bins = metrics::kClassificationBins;
  std::size_t coverage_levels = metrics::kCoverageLevels;
  double tau = kDefaultMatchThreshold;
  bool pool_xyz = false;  // one MCA over pooled x/y/z residuals instead of the mean of three
  std::size_t workers = 1;
};

using MetricMap = std::map<std::string, double>;

struct ThresholdReport {
  double threshold = 0.0;
  std::map<int, MetricMap> per_class;  // classes with at least one retained detection
  MetricMap class_mean;
};

struct CalibrationReport {
  ReportConfig config;
  std::vector<std::string> class_names;
  std::vector<ThresholdReport> per_threshold;
  std::map<int, MetricMap> per_class;  // mean over the thresholds where the class is present
  MetricMap aggregates;                // mean over thresholds of the class means
};

/// Metrics of one class from the retained detections and their matches:
/// d_ece, la_ece, la_ace and, when the class has TPs, mca_xyz, mca_lwh,
/// mca_yaw and ks_xyz; plus the detection and TP counts.
MetricMap class_metrics(const Dataset& dataset, std::span<const MatchResult> matches, int class_id,
                        const ReportConfig& config);

/// Drops detections with score below each threshold, rematches, computes
/// class metrics and averages over classes and thresholds.
CalibrationReport classwise_threshold_report(const Dataset& dataset, const ReportConfig& config);

/// JSON with separate "config" and "results" sections; `timestamp` adds a
/// generation time outside both.
std::string report_json(const CalibrationReport& report, bool timestamp);

/// Reliability-diagram rows over all detections with score >= min_score.
std::string reliability_csv(const Dataset& dataset, double min_score, const ReportConfig& config);

enum class CoverageGroup { xyz, lwh, yaw };

/// Coverage curve of the pooled standardized residuals of a target group.
std::string coverage_csv(const Dataset& dataset, double min_score, CoverageGroup group, const ReportConfig& config);

}  // namespace uqcal::report
