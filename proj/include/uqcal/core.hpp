#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace uqcal {

inline constexpr std::size_t kDefaultFeatureDim = 256;

/// Box with per-parameter uncertainty: Gaussian variances for center and size,
/// von-Mises concentration for yaw. Velocity is carried but never calibrated.
struct ProbabilisticBox {
  std::array<double, 3> center{};
  std::array<double, 3> size{};
  double yaw = 0.0;
  std::optional<std::array<double, 2>> velocity;
  std::array<double, 3> center_var{1.0, 1.0, 1.0};
  std::array<double, 3> size_var{1.0, 1.0, 1.0};
  double yaw_kappa = 1.0;
};

struct DetectionRecord {
  std::string frame_id;
  int class_id = 0;
  double logit = 0.0;
  double score = 0.5;
  ProbabilisticBox box;
  std::vector<double> query_feature;
  double depth = 0.0;
};

struct GroundTruthRecord {
  std::string frame_id;
  int class_id = 0;
  std::array<double, 3> center{};
  std::array<double, 3> size{1.0, 1.0, 1.0};
  double yaw = 0.0;
};

/// Builds a detection with score and depth derived from logit and box center,
/// and yaw wrapped to [-pi, pi).
DetectionRecord make_detection(std::string frame_id, int class_id, double logit, ProbabilisticBox box,
                               std::vector<double> feature);

/// Planar distance of a box center from the origin.
double planar_depth(const std::array<double, 3>& center);

struct DatasetHeader {
  std::vector<std::string> class_names;
  std::size_t feature_dim = kDefaultFeatureDim;
  std::vector<std::string> frames;  // optional ordering; empty when the file does not declare it
};

struct Dataset {
  std::vector<std::string> frames;
  std::vector<DetectionRecord> detections;
  std::vector<GroundTruthRecord> ground_truths;
  std::vector<std::string> class_names;
  std::size_t feature_dim = kDefaultFeatureDim;

  std::size_t num_classes() const { return class_names.size(); }
  DatasetHeader header() const { return {class_names, feature_dim, frames}; }
};

// Invariant checks. Each throws ValidationError naming the offending field.
void validate(const ProbabilisticBox& box);
void validate(const DetectionRecord& det, std::size_t feature_dim, std::size_t num_classes);
void validate(const GroundTruthRecord& gt, std::size_t num_classes);
void validate(const Dataset& dataset);

// JSON Lines codec. Detection and ground-truth files start with a header line
// {"meta": {"classes": [...], "feature_dim": D, "frames": [...]}}.
DatasetHeader parse_header_line(std::string_view line, std::size_t line_no = 1);
DetectionRecord parse_detection_line(std::string_view line, const DatasetHeader& header, std::size_t line_no = 0);
GroundTruthRecord parse_ground_truth_line(std::string_view line, const DatasetHeader& header,
                                          std::size_t line_no = 0);

std::string serialize_header(const DatasetHeader& header);
std::string serialize_detection(const DetectionRecord& det);
std::string serialize_ground_truth(const GroundTruthRecord& gt);

std::vector<DetectionRecord> read_detections(const std::filesystem::path& path, DatasetHeader* header = nullptr,
                                             std::size_t workers = 1);
std::vector<GroundTruthRecord> read_ground_truths(const std::filesystem::path& path,
                                                  DatasetHeader* header = nullptr);

/// Files for a dataset stored under `prefix`: prefix.det.jsonl and prefix.gt.jsonl.
std::filesystem::path detections_path(const std::filesystem::path& prefix);
std::filesystem::path ground_truths_path(const std::filesystem::path& prefix);

Dataset load_dataset(const std::filesystem::path& prefix, std::size_t workers = 1);
void save_dataset(const Dataset& dataset, const std::filesystem::path& prefix);

/// Sequential split by frame: the first ceil(fraction * |frames|) frames go to
/// the first half. Throws ValidationError on an empty dataset.
std::pair<Dataset, Dataset> sequential_split(const Dataset& dataset, double fraction);

/// Concatenates datasets that share classes and feature dimension.
Dataset concatenate(const Dataset& first, const Dataset& second);

}  // namespace uqcal
