#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "uqcal/core.hpp"

namespace uqcal {

inline constexpr double kDefaultMatchThreshold = 2.0;

/// Regression targets in the order x, y, z, l, w, h, yaw.
inline constexpr std::size_t kNumRegressionTargets = 7;

struct MatchResult {
  std::size_t detection_index = 0;
  bool is_tp = false;
  std::optional<std::size_t> matched_gt_index;
  std::optional<double> center_distance;  // planar, meters
  // gt - pred for x, y, z, l, w, h and the wrapped yaw difference
  std::optional<std::array<double, kNumRegressionTargets>> residuals;
};

/// Greedy class-gated center-distance matching within a single frame.
/// Predictions are visited by descending score (ties by input order) and take
/// the nearest unmatched same-class ground truth within `tau` on the ground
/// plane. Indices in the result refer to positions within `preds` / `gts`.
std::vector<MatchResult> match_frame(std::span<const DetectionRecord> preds, std::span<const GroundTruthRecord> gts,
                                     double tau = kDefaultMatchThreshold);

/// Matches every frame of a dataset. When `keep` is non-empty only detections
/// with keep[i] != 0 take part. Results are ordered by detection index and
/// carry dataset-level detection and ground-truth indices.
std::vector<MatchResult> match_dataset(const Dataset& dataset, double tau = kDefaultMatchThreshold,
                                       std::span<const std::uint8_t> keep = {}, std::size_t workers = 1);

}  // namespace uqcal
