#include "uqcal/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_map>

#include "uqcal/errors.hpp"
#include "uqcal/math.hpp"
#include "uqcal/parallel.hpp"

namespace uqcal {

namespace {

std::vector<MatchResult> match_pointers(const std::vector<const DetectionRecord*>& preds,
                                        const std::vector<const GroundTruthRecord*>& gts, double tau) {
  if (!(tau > 0.0)) throw ConfigError("matching threshold must be > 0");

  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a]->score > preds[b]->score; });

  std::vector<bool> taken(gts.size(), false);
  std::vector<MatchResult> results(preds.size());
  for (std::size_t i : order) {
    const DetectionRecord& p = *preds[i];
    MatchResult& r = results[i];
    r.detection_index = i;

    std::size_t best = gts.size();
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g]->class_id != p.class_id) continue;
      const double d = std::hypot(gts[g]->center[0] - p.box.center[0], gts[g]->center[1] - p.box.center[1]);
      if (d <= tau && d < best_dist) {
        best = g;
        best_dist = d;
      }
    }
    if (best == gts.size()) continue;

    taken[best] = true;
    const GroundTruthRecord& gt = *gts[best];
    r.is_tp = true;
    r.matched_gt_index = best;
    r.center_distance = best_dist;
    std::array<double, kNumRegressionTargets> res{};
    for (std::size_t k = 0; k < 3; ++k) {
      res[k] = gt.center[k] - p.box.center[k];
      res[3 + k] = gt.size[k] - p.box.size[k];
    }
    res[6] = wrap_angle(gt.yaw - p.box.yaw);
    r.residuals = res;
  }
  return results;
}

}  // namespace

std::vector<MatchResult> match_frame(std::span<const DetectionRecord> preds, std::span<const GroundTruthRecord> gts,
                                     double tau) {
  std::vector<const DetectionRecord*> p;
  std::vector<const GroundTruthRecord*> g;
  for (const auto& d : preds) p.push_back(&d);
  for (const auto& t : gts) g.push_back(&t);
  return match_pointers(p, g, tau);
}

std::vector<MatchResult> match_dataset(const Dataset& dataset, double tau, std::span<const std::uint8_t> keep,
                                       std::size_t workers) {
  if (!keep.empty() && keep.size() != dataset.detections.size()) {
    throw ConfigError("keep mask length must equal the number of detections");
  }
  std::unordered_map<std::string, std::size_t> frame_slot;
  frame_slot.reserve(dataset.frames.size());
  for (std::size_t f = 0; f < dataset.frames.size(); ++f) frame_slot.emplace(dataset.frames[f], f);

  std::vector<std::vector<std::size_t>> det_idx(dataset.frames.size());
  std::vector<std::vector<std::size_t>> gt_idx(dataset.frames.size());
  auto slot_of = [&](const std::string& frame) {
    const auto it = frame_slot.find(frame);
    if (it == frame_slot.end()) throw ValidationError("frame '" + frame + "' not declared in dataset");
    return it->second;
  };
  for (std::size_t i = 0; i < dataset.detections.size(); ++i) {
    if (keep.empty() || keep[i] != 0) det_idx[slot_of(dataset.detections[i].frame_id)].push_back(i);
  }
  for (std::size_t g = 0; g < dataset.ground_truths.size(); ++g) {
    gt_idx[slot_of(dataset.ground_truths[g].frame_id)].push_back(g);
  }

  std::vector<std::vector<MatchResult>> per_frame(dataset.frames.size());
  parallel_for(dataset.frames.size(), workers, [&](std::size_t f) {
    std::vector<const DetectionRecord*> preds;
    std::vector<const GroundTruthRecord*> gts;
    preds.reserve(det_idx[f].size());
    gts.reserve(gt_idx[f].size());
    for (std::size_t i : det_idx[f]) preds.push_back(&dataset.detections[i]);
    for (std::size_t g : gt_idx[f]) gts.push_back(&dataset.ground_truths[g]);
    auto local = match_pointers(preds, gts, tau);
    for (auto& r : local) {
      r.detection_index = det_idx[f][r.detection_index];
      if (r.matched_gt_index) r.matched_gt_index = gt_idx[f][*r.matched_gt_index];
    }
    per_frame[f] = std::move(local);
  });

  std::vector<MatchResult> all;
  for (auto& v : per_frame) all.insert(all.end(), v.begin(), v.end());
  std::sort(all.begin(), all.end(),
            [](const MatchResult& a, const MatchResult& b) { return a.detection_index < b.detection_index; });
  return all;
}

}  // namespace uqcal
