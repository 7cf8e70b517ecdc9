#include "uqcal/core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "uqcal/diagnostics.hpp"
#include "uqcal/errors.hpp"
#include "uqcal/math.hpp"
#include "uqcal/parallel.hpp"

namespace uqcal {

using nlohmann::json;

namespace {

std::string indexed(const char* field, std::size_t i) {
  return std::string(field) + "[" + std::to_string(i) + "]";
}

void require_finite(double v, const std::string& field) {
  if (!std::isfinite(v)) throw ValidationError(field + " must be finite");
}

void require_positive(double v, const std::string& field) {
  if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError(field + " must be > 0");
}

json parse_object(std::string_view line, std::size_t line_no) {
  json j;
  try {
    j = json::parse(line.begin(), line.end());
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
  }
  if (!j.is_object()) throw ParseError("expected a JSON object", line_no);
  return j;
}

const json& field(const json& obj, const char* key, std::size_t line_no) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(std::string("missing key '") + key + "'", line_no);
  return *it;
}

double number(const json& j, const std::string& name, std::size_t line_no) {
  if (!j.is_number()) throw ParseError("'" + name + "' must be a number", line_no);
  return j.get<double>();
}

template <std::size_t N>
std::array<double, N> fixed_array(const json& j, const std::string& name, std::size_t line_no) {
  if (!j.is_array() || j.size() != N) {
    throw ParseError("'" + name + "' must be an array of " + std::to_string(N) + " numbers", line_no);
  }
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = number(j[i], name, line_no);
  return out;
}

std::string frame_token(const json& j, std::size_t line_no) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_number_integer()) return std::to_string(j.get<long long>());
  throw ParseError("'frame' must be a string or integer", line_no);
}

int class_index(const json& j, std::size_t line_no) {
  if (!j.is_number_integer()) throw ParseError("'class' must be an integer", line_no);
  return j.get<int>();
}

template <typename Record, typename ParseFn>
std::vector<Record> read_records(const std::filesystem::path& path, DatasetHeader* header_out, std::size_t workers,
                                 ParseFn parse) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  DatasetHeader header;
  bool have_header = false;
  std::vector<std::pair<std::size_t, std::string>> lines;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (!have_header) {
      header = parse_header_line(line, line_no);
      have_header = true;
      continue;
    }
    lines.emplace_back(line_no, std::move(line));
  }
  if (!have_header) throw ParseError("missing header line in " + path.string(), 1);

  std::vector<Record> records(lines.size());
  parallel_for(lines.size(), workers, [&](std::size_t i) {
    try {
      records[i] = parse(lines[i].second, header, lines[i].first);
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lines[i].first) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
  });
  if (header_out != nullptr) *header_out = std::move(header);
  return records;
}

}  // namespace

double planar_depth(const std::array<double, 3>& center) { return std::hypot(center[0], center[1]); }

DetectionRecord make_detection(std::string frame_id, int class_id, double logit, ProbabilisticBox box,
                               std::vector<double> feature) {
  DetectionRecord det;
  det.frame_id = std::move(frame_id);
  det.class_id = class_id;
  det.logit = logit;
  det.score = sigmoid(logit);
  box.yaw = wrap_angle(box.yaw);
  det.depth = planar_depth(box.center);
  det.box = std::move(box);
  det.query_feature = std::move(feature);
  return det;
}

void validate(const ProbabilisticBox& box) {
  for (std::size_t i = 0; i < 3; ++i) {
    require_finite(box.center[i], indexed("center", i));
    require_finite(box.size[i], indexed("size", i));
    require_positive(box.center_var[i], indexed("center_var", i));
    require_positive(box.size_var[i], indexed("size_var", i));
  }
  require_finite(box.yaw, "yaw");
  if (box.yaw < -kPi || box.yaw >= kPi) throw ValidationError("yaw must be wrapped to [-pi, pi)");
  require_positive(box.yaw_kappa, "yaw_kappa");
  if (box.velocity) {
    require_finite((*box.velocity)[0], "velocity[0]");
    require_finite((*box.velocity)[1], "velocity[1]");
  }
}

void validate(const DetectionRecord& det, std::size_t feature_dim, std::size_t num_classes) {
  if (det.class_id < 0 || static_cast<std::size_t>(det.class_id) >= num_classes) {
    throw ValidationError("class must be in [0, " + std::to_string(num_classes) + ")");
  }
  require_finite(det.logit, "logit");
  if (std::abs(det.score - sigmoid(det.logit)) > 1e-12) throw ValidationError("score must equal sigmoid(logit)");
  validate(det.box);
  if (det.query_feature.size() != feature_dim) {
    throw ValidationError("feature has length " + std::to_string(det.query_feature.size()) + ", expected " +
                          std::to_string(feature_dim));
  }
  for (std::size_t i = 0; i < det.query_feature.size(); ++i) require_finite(det.query_feature[i], indexed("feature", i));
  if (!(det.depth >= 0.0) || std::abs(det.depth - planar_depth(det.box.center)) > 1e-9) {
    throw ValidationError("depth must equal the planar distance of the box center");
  }
}

void validate(const GroundTruthRecord& gt, std::size_t num_classes) {
  if (gt.class_id < 0 || static_cast<std::size_t>(gt.class_id) >= num_classes) {
    throw ValidationError("class must be in [0, " + std::to_string(num_classes) + ")");
  }
  for (std::size_t i = 0; i < 3; ++i) {
    require_finite(gt.center[i], indexed("center", i));
    require_positive(gt.size[i], indexed("size", i));
  }
  require_finite(gt.yaw, "yaw");
  if (gt.yaw < -kPi || gt.yaw >= kPi) throw ValidationError("yaw must be wrapped to [-pi, pi)");
}

void validate(const Dataset& dataset) {
  if (dataset.class_names.empty()) throw ValidationError("dataset declares no classes");
  std::unordered_set<std::string> frames(dataset.frames.begin(), dataset.frames.end());
  if (frames.size() != dataset.frames.size()) throw ValidationError("duplicate frame ids");
  for (const auto& d : dataset.detections) {
    validate(d, dataset.feature_dim, dataset.num_classes());
    if (!frames.contains(d.frame_id)) throw ValidationError("detection frame '" + d.frame_id + "' not in frames");
  }
  for (const auto& g : dataset.ground_truths) {
    validate(g, dataset.num_classes());
    if (!frames.contains(g.frame_id)) throw ValidationError("ground truth frame '" + g.frame_id + "' not in frames");
  }
}

DatasetHeader parse_header_line(std::string_view line, std::size_t line_no) {
  const json j = parse_object(line, line_no);
  const json& meta = field(j, "meta", line_no);
  DatasetHeader header;
  const json& classes = field(meta, "classes", line_no);
  if (!classes.is_array() || classes.empty()) throw ParseError("'classes' must be a non-empty array", line_no);
  for (const auto& c : classes) {
    if (!c.is_string()) throw ParseError("class names must be strings", line_no);
    header.class_names.push_back(c.get<std::string>());
  }
  if (const auto it = meta.find("feature_dim"); it != meta.end()) {
    if (!it->is_number_unsigned()) throw ParseError("'feature_dim' must be a positive integer", line_no);
    header.feature_dim = it->get<std::size_t>();
  }
  if (const auto it = meta.find("frames"); it != meta.end()) {
    if (!it->is_array()) throw ParseError("'frames' must be an array", line_no);
    for (const auto& f : *it) header.frames.push_back(frame_token(f, line_no));
  }
  return header;
}

DetectionRecord parse_detection_line(std::string_view line, const DatasetHeader& header, std::size_t line_no) {
  const json j = parse_object(line, line_no);
  DetectionRecord det;
  det.frame_id = frame_token(field(j, "frame", line_no), line_no);
  det.class_id = class_index(field(j, "class", line_no), line_no);
  det.logit = number(field(j, "logit", line_no), "logit", line_no);

  const json& b = field(j, "box", line_no);
  ProbabilisticBox& box = det.box;
  box.center = fixed_array<3>(field(b, "center", line_no), "center", line_no);
  box.size = fixed_array<3>(field(b, "size", line_no), "size", line_no);
  box.yaw = wrap_angle(number(field(b, "yaw", line_no), "yaw", line_no));
  box.center_var = fixed_array<3>(field(b, "center_var", line_no), "center_var", line_no);
  box.size_var = fixed_array<3>(field(b, "size_var", line_no), "size_var", line_no);
  box.yaw_kappa = number(field(b, "yaw_kappa", line_no), "yaw_kappa", line_no);
  if (const auto it = b.find("velocity"); it != b.end() && !it->is_null()) {
    box.velocity = fixed_array<2>(*it, "velocity", line_no);
  }

  const json& feat = field(j, "feature", line_no);
  if (!feat.is_array()) throw ParseError("'feature' must be an array", line_no);
  det.query_feature.reserve(feat.size());
  for (const auto& v : feat) det.query_feature.push_back(number(v, "feature", line_no));

  det.score = sigmoid(det.logit);
  if (const auto it = j.find("score"); it != j.end()) {
    const double s = number(*it, "score", line_no);
    if (std::abs(s - det.score) > 1e-12) throw ValidationError("score must equal sigmoid(logit)");
  }
  det.depth = planar_depth(box.center);
  if (const auto it = j.find("depth"); it != j.end()) {
    const double d = number(*it, "depth", line_no);
    if (std::abs(d - det.depth) > 1e-9) throw ValidationError("depth must equal the planar distance of the box center");
  }
  validate(det, header.feature_dim, header.class_names.size());
  return det;
}

GroundTruthRecord parse_ground_truth_line(std::string_view line, const DatasetHeader& header, std::size_t line_no) {
  const json j = parse_object(line, line_no);
  GroundTruthRecord gt;
  gt.frame_id = frame_token(field(j, "frame", line_no), line_no);
  gt.class_id = class_index(field(j, "class", line_no), line_no);
  gt.center = fixed_array<3>(field(j, "center", line_no), "center", line_no);
  gt.size = fixed_array<3>(field(j, "size", line_no), "size", line_no);
  gt.yaw = wrap_angle(number(field(j, "yaw", line_no), "yaw", line_no));
  validate(gt, header.class_names.size());
  return gt;
}

std::string serialize_header(const DatasetHeader& header) {
  json meta = {{"classes", header.class_names}, {"feature_dim", header.feature_dim}};
  if (!header.frames.empty()) meta["frames"] = header.frames;
  return json{{"meta", meta}}.dump();
}

std::string serialize_detection(const DetectionRecord& det) {
  const ProbabilisticBox& b = det.box;
  json box = {{"center", b.center},         {"size", b.size},         {"yaw", b.yaw},
              {"center_var", b.center_var}, {"size_var", b.size_var}, {"yaw_kappa", b.yaw_kappa}};
  if (b.velocity) box["velocity"] = *b.velocity;
  json j = {{"frame", det.frame_id}, {"class", det.class_id}, {"logit", det.logit}, {"score", det.score},
            {"depth", det.depth},    {"box", box},            {"feature", det.query_feature}};
  return j.dump();
}

std::string serialize_ground_truth(const GroundTruthRecord& gt) {
  json j = {{"frame", gt.frame_id}, {"class", gt.class_id}, {"center", gt.center}, {"size", gt.size}, {"yaw", gt.yaw}};
  return j.dump();
}

std::vector<DetectionRecord> read_detections(const std::filesystem::path& path, DatasetHeader* header,
                                             std::size_t workers) {
  return read_records<DetectionRecord>(path, header, workers, [](std::string_view line, const DatasetHeader& h,
                                                                  std::size_t n) {
    return parse_detection_line(line, h, n);
  });
}

std::vector<GroundTruthRecord> read_ground_truths(const std::filesystem::path& path, DatasetHeader* header) {
  return read_records<GroundTruthRecord>(path, header, 1, [](std::string_view line, const DatasetHeader& h,
                                                              std::size_t n) {
    return parse_ground_truth_line(line, h, n);
  });
}

std::filesystem::path detections_path(const std::filesystem::path& prefix) {
  return std::filesystem::path(prefix.string() + ".det.jsonl");
}

std::filesystem::path ground_truths_path(const std::filesystem::path& prefix) {
  return std::filesystem::path(prefix.string() + ".gt.jsonl");
}

Dataset load_dataset(const std::filesystem::path& prefix, std::size_t workers) {
  DatasetHeader det_header;
  DatasetHeader gt_header;
  Dataset ds;
  ds.detections = read_detections(detections_path(prefix), &det_header, workers);
  ds.ground_truths = read_ground_truths(ground_truths_path(prefix), &gt_header);
  if (det_header.class_names != gt_header.class_names) {
    throw ValidationError("class lists differ between detection and ground-truth files of " + prefix.string());
  }
  ds.class_names = det_header.class_names;
  ds.feature_dim = det_header.feature_dim;
  ds.frames = det_header.frames;
  if (ds.frames.empty()) {
    std::unordered_set<std::string> seen;
    auto note = [&](const std::string& f) {
      if (seen.insert(f).second) ds.frames.push_back(f);
    };
    for (const auto& d : ds.detections) note(d.frame_id);
    for (const auto& g : ds.ground_truths) note(g.frame_id);
  }
  validate(ds);
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& prefix) {
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  const std::string header = serialize_header(dataset.header());
  {
    std::ofstream out(detections_path(prefix));
    if (!out) throw ValidationError("cannot write " + detections_path(prefix).string());
    out << header << '\n';
    for (const auto& d : dataset.detections) out << serialize_detection(d) << '\n';
  }
  std::ofstream out(ground_truths_path(prefix));
  if (!out) throw ValidationError("cannot write " + ground_truths_path(prefix).string());
  out << header << '\n';
  for (const auto& g : dataset.ground_truths) out << serialize_ground_truth(g) << '\n';
}

std::pair<Dataset, Dataset> sequential_split(const Dataset& dataset, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must be in (0, 1)");
  if (dataset.frames.empty()) throw ValidationError("cannot split an empty dataset");

  const std::size_t n = dataset.frames.size();
  // Guard against 0.4 * 10 landing a hair above 4.
  const auto head = std::min(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));

  Dataset first;
  Dataset second;
  for (Dataset* d : {&first, &second}) {
    d->class_names = dataset.class_names;
    d->feature_dim = dataset.feature_dim;
  }
  first.frames.assign(dataset.frames.begin(), dataset.frames.begin() + static_cast<std::ptrdiff_t>(head));
  second.frames.assign(dataset.frames.begin() + static_cast<std::ptrdiff_t>(head), dataset.frames.end());
  if (second.frames.empty()) warn("sequential split leaves the second part empty");

  const std::unordered_set<std::string> head_frames(first.frames.begin(), first.frames.end());
  for (const auto& d : dataset.detections) {
    (head_frames.contains(d.frame_id) ? first : second).detections.push_back(d);
  }
  for (const auto& g : dataset.ground_truths) {
    (head_frames.contains(g.frame_id) ? first : second).ground_truths.push_back(g);
  }
  return {std::move(first), std::move(second)};
}

Dataset concatenate(const Dataset& first, const Dataset& second) {
  if (first.class_names != second.class_names || first.feature_dim != second.feature_dim) {
    throw ValidationError("cannot concatenate datasets with different classes or feature dimension");
  }
  Dataset out = first;
  out.frames.insert(out.frames.end(), second.frames.begin(), second.frames.end());
  out.detections.insert(out.detections.end(), second.detections.begin(), second.detections.end());
  out.ground_truths.insert(out.ground_truths.end(), second.ground_truths.begin(), second.ground_truths.end());
  return out;
}

}  // namespace uqcal
