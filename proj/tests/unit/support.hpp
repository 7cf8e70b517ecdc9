#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "uqcal/core.hpp"

namespace uqcal::test {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("uqcal-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline DetectionRecord detection(const std::string& frame, int class_id, double logit, double x, double y,
                                 std::size_t dim = 2) {
  ProbabilisticBox box;
  box.center = {x, y, 1.0};
  box.size = {4.0, 2.0, 1.5};
  return make_detection(frame, class_id, logit, box, std::vector<double>(dim, 0.0));
}

inline GroundTruthRecord ground_truth(const std::string& frame, int class_id, double x, double y) {
  GroundTruthRecord g;
  g.frame_id = frame;
  g.class_id = class_id;
  g.center = {x, y, 1.0};
  g.size = {4.0, 2.0, 1.5};
  return g;
}

/// A dataset with `frames` frames, each holding one GT and one matching detection per class.
inline Dataset grid_dataset(std::size_t frames, std::size_t classes = 2, std::size_t dim = 2) {
  Dataset ds;
  ds.feature_dim = dim;
  for (std::size_t c = 0; c < classes; ++c) ds.class_names.push_back("c" + std::to_string(c));
  for (std::size_t f = 0; f < frames; ++f) {
    const std::string id = "f" + std::to_string(f);
    ds.frames.push_back(id);
    for (std::size_t c = 0; c < classes; ++c) {
      const double x = 10.0 * static_cast<double>(c);
      ds.ground_truths.push_back(ground_truth(id, static_cast<int>(c), x, 0.0));
      ds.detections.push_back(detection(id, static_cast<int>(c), 1.0, x + 0.5, 0.0, dim));
    }
  }
  return ds;
}

inline std::vector<double> uniform_vector(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace uqcal::test
