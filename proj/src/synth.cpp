#include "uqcal/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "uqcal/errors.hpp"
#include "uqcal/math.hpp"
#include "uqcal/parallel.hpp"

namespace uqcal::synth {
namespace {

using Eigen::Index;
using Eigen::VectorXd;

constexpr std::uint64_t kStructureStream = 0x5eedf00dULL;

struct Structure {
  std::vector<VectorXd> class_means;
  VectorXd shift_direction;
};

Structure draw_structure(const SynthConfig& c) {
  std::mt19937_64 rng(mix_seed(c.seed, kStructureStream));
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = static_cast<Index>(c.feature_dim);
  Structure s;
  for (std::size_t k = 0; k < c.num_classes; ++k) {
    VectorXd m(d);
    for (Index i = 0; i < d; ++i) m[i] = c.class_separation * c.feature_scale * normal(rng);
    s.class_means.push_back(m);
  }
  s.shift_direction.resize(d);
  for (Index i = 0; i < d; ++i) s.shift_direction[i] = normal(rng);
  s.shift_direction.normalize();
  return s;
}

double shift_magnitude(const SynthConfig& c, std::size_t severity) {
  const double dim = static_cast<double>(c.feature_dim);
  return c.feature_scale * std::sqrt(std::max(0.0, c.feature_shift[severity]) * std::sqrt(2.0 * dim));
}

std::array<double, 3> base_size(std::size_t class_id) {
  static const std::array<std::array<double, 3>, 5> sizes{{
      {4.6, 1.9, 1.7},
      {8.0, 2.5, 3.0},
      {0.7, 0.7, 1.8},
      {1.8, 0.6, 1.3},
      {2.0, 2.0, 2.0},
  }};
  return sizes[class_id % sizes.size()];
}

struct FrameOutput {
  std::vector<DetectionRecord> detections;
  std::vector<GroundTruthRecord> ground_truths;
  std::vector<std::uint8_t> planted_tp;
  std::vector<double> atypicality;
};

FrameOutput generate_frame(const SynthConfig& c, const Structure& st, Role role, std::size_t severity,
                           std::size_t frame_index, const std::string& frame_id) {
  std::mt19937_64 rng(mix_seed(c.seed, static_cast<std::uint64_t>(role) + 1, frame_index));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> position(-c.scene_extent, c.scene_extent);
  std::poisson_distribution<int> count(c.objects_per_frame);
  std::discrete_distribution<int> pick_class =
      c.class_weights.empty() ? std::discrete_distribution<int>(c.num_classes, 0.0, 1.0, [](double) { return 1.0; })
                              : std::discrete_distribution<int>(c.class_weights.begin(), c.class_weights.end());

  const auto dim = static_cast<Index>(c.feature_dim);
  const double shift = shift_magnitude(c, severity);
  const double inflation_s = c.residual_inflation[severity];
  const double tau = c.match_threshold;

  FrameOutput out;
  const int n_objects = count(rng);
  for (int o = 0; o < n_objects; ++o) {
    const int cls = pick_class(rng);
    std::array<double, 3> center{};
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      center = {position(rng), position(rng), 0.9 + 0.3 * normal(rng)};
      placed = std::all_of(out.ground_truths.begin(), out.ground_truths.end(), [&](const GroundTruthRecord& g) {
        return std::hypot(g.center[0] - center[0], g.center[1] - center[1]) >= c.min_separation;
      });
    }
    if (!placed) continue;
    GroundTruthRecord gt;
    gt.frame_id = frame_id;
    gt.class_id = cls;
    gt.center = center;
    const auto base = base_size(static_cast<std::size_t>(cls));
    for (std::size_t k = 0; k < 3; ++k) gt.size[k] = base[k] * std::exp(0.1 * normal(rng));
    gt.yaw = wrap_angle(kPi * (2.0 * unit(rng) - 1.0));
    out.ground_truths.push_back(gt);
  }

  for (const auto& gt : out.ground_truths) {
    const auto cls = static_cast<std::size_t>(gt.class_id);
    VectorXd u(dim);
    for (Index i = 0; i < dim; ++i) u[i] = c.feature_scale * normal(rng);
    u += shift * st.shift_direction;
    const double d = static_cast<double>(dim);
    const double a = (u.squaredNorm() / (c.feature_scale * c.feature_scale) - d) / std::sqrt(2.0 * d);
    const double a_plus = std::max(a, 0.0);

    const double logit = c.logit_mean + c.logit_std * normal(rng);
    const double t_star = c.temperature.empty() ? 1.0 : c.temperature[cls];
    const double p_tp = sigmoid(logit / (t_star * (1.0 + c.atypicality_temperature_gain * a_plus)) -
                                c.atypicality_logit_offset * a_plus);
    const bool tp = unit(rng) < p_tp;
    const double h = std::exp(c.heteroscedastic_spread * normal(rng));
    const double spread = inflation_s * (1.0 + c.atypicality_residual_gain * a_plus);

    VectorXd feature = st.class_means[cls] + u;
    if (!tp && unit(rng) < c.clutter_fraction) {
      for (Index i = 0; i < dim; ++i) feature[i] = c.background_scale * c.feature_scale * normal(rng);
    }

    ProbabilisticBox box;
    std::array<double, kNumRegressionTargets> sigma{};
    for (std::size_t k = 0; k < kNumRegressionTargets; ++k) sigma[k] = c.noise_scale[k] * std::sqrt(h) * spread;
    if (tp) {
      std::array<double, 2> offset{};
      for (int attempt = 0; attempt < 100; ++attempt) {
        offset = {sigma[0] * normal(rng), sigma[1] * normal(rng)};
        if (std::hypot(offset[0], offset[1]) < tau) break;
      }
      const double r = std::hypot(offset[0], offset[1]);
      if (r >= tau) {
        offset[0] *= 0.99 * tau / r;
        offset[1] *= 0.99 * tau / r;
      }
      box.center = {gt.center[0] + offset[0], gt.center[1] + offset[1], gt.center[2] + sigma[2] * normal(rng)};
    } else {
      std::array<double, 2> xy{};
      bool far = false;
      for (int attempt = 0; attempt < 100 && !far; ++attempt) {
        xy = {position(rng), position(rng)};
        far = std::all_of(out.ground_truths.begin(), out.ground_truths.end(), [&](const GroundTruthRecord& g) {
          return std::hypot(g.center[0] - xy[0], g.center[1] - xy[1]) > tau;
        });
      }
      if (!far) xy = {c.scene_extent + 10.0 * tau, c.scene_extent + 10.0 * tau};
      box.center = {xy[0], xy[1], gt.center[2] + sigma[2] * normal(rng)};
    }
    for (std::size_t k = 0; k < 3; ++k) {
      double s = gt.size[k] + sigma[k + 3] * normal(rng);
      for (int attempt = 0; attempt < 100 && s <= 0.05; ++attempt) s = gt.size[k] + sigma[k + 3] * normal(rng);
      box.size[k] = std::max(s, 0.05);
    }
    const double kappa_true = 1.0 / (sigma[6] * sigma[6]);
    box.yaw = wrap_angle(gt.yaw + sample_von_mises(kappa_true, rng));
    box.velocity = std::array<double, 2>{normal(rng), normal(rng)};
    for (std::size_t k = 0; k < 3; ++k) {
      box.center_var[k] = c.inflation[k] * c.noise_scale[k] * c.noise_scale[k] * h;
      box.size_var[k] = c.inflation[k + 3] * c.noise_scale[k + 3] * c.noise_scale[k + 3] * h;
    }
    box.yaw_kappa = 1.0 / (c.inflation[6] * c.noise_scale[6] * c.noise_scale[6] * h);

    std::vector<double> f(feature.data(), feature.data() + feature.size());
    out.detections.push_back(make_detection(frame_id, gt.class_id, logit, box, std::move(f)));
    out.planted_tp.push_back(tp ? 1 : 0);
    out.atypicality.push_back(a);
  }
  return out;
}

nlohmann::json vec_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace

std::string to_string(Role role) {
  switch (role) {
    case Role::train:
      return "train";
    case Role::calib:
      return "calib";
    case Role::test:
      return "test";
  }
  return "train";
}

void validate(const SynthConfig& c) {
  if (c.num_classes == 0) throw ConfigError("synth: num_classes must be >= 1");
  if (c.feature_dim == 0) throw ConfigError("synth: feature_dim must be >= 1");
  if (!c.class_weights.empty() && c.class_weights.size() != c.num_classes) {
    throw ConfigError("synth: class_weights needs one entry per class");
  }
  if (!c.temperature.empty() && c.temperature.size() != c.num_classes) {
    throw ConfigError("synth: temperature needs one entry per class");
  }
  for (double t : c.temperature) {
    if (!(t > 0.0)) throw ConfigError("synth: planted temperatures must be > 0");
  }
  for (double r : c.inflation) {
    if (!(r > 0.0)) throw ConfigError("synth: planted inflation factors must be > 0");
  }
  for (double s : c.noise_scale) {
    if (!(s > 0.0)) throw ConfigError("synth: noise scales must be > 0");
  }
  for (double r : c.residual_inflation) {
    if (!(r > 0.0)) throw ConfigError("synth: residual inflation must be > 0");
  }
  if (c.feature_shift[0] != 0.0 || c.residual_inflation[0] != 1.0) {
    throw ConfigError("synth: severity 0 must carry no shift");
  }
  if (!(c.feature_scale > 0.0) || !(c.background_scale > 0.0)) throw ConfigError("synth: scales must be > 0");
  if (!(c.objects_per_frame > 0.0)) throw ConfigError("synth: objects_per_frame must be > 0");
  if (!(c.clutter_fraction >= 0.0 && c.clutter_fraction <= 1.0)) throw ConfigError("synth: clutter_fraction must be in [0, 1]");
  if (!(c.min_separation > 2.0 * c.match_threshold)) {
    throw ConfigError("synth: min_separation must exceed twice the match threshold");
  }
}

std::vector<std::string> default_class_names(std::size_t num_classes) {
  static const std::vector<std::string> names{"car", "truck", "pedestrian", "bicycle", "barrier"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < num_classes; ++i) {
    out.push_back(i < names.size() ? names[i] : "class" + std::to_string(i));
  }
  return out;
}

double sample_von_mises(double kappa, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (kappa < 1e-8) return kPi * (2.0 * unit(rng) - 1.0);
  const double tau = 1.0 + std::sqrt(1.0 + 4.0 * kappa * kappa);
  const double rho = (tau - std::sqrt(2.0 * tau)) / (2.0 * kappa);
  const double r = (1.0 + rho * rho) / (2.0 * rho);
  for (;;) {
    const double u1 = unit(rng);
    const double u2 = unit(rng);
    const double u3 = unit(rng);
    const double z = std::cos(kPi * u1);
    const double f = (1.0 + r * z) / (r + z);
    const double c = kappa * (r - f);
    if (c * (2.0 - c) - u2 > 0.0 || std::log(c / u2) + 1.0 - c >= 0.0) {
      const double theta = std::acos(std::clamp(f, -1.0, 1.0));
      return u3 > 0.5 ? theta : -theta;
    }
  }
}

SynthSplit generate_split(const SynthConfig& config, Role role, std::size_t severity) {
  validate(config);
  if (severity >= kNumSeverities) throw ConfigError("synth: severity must be in 0..3");
  const Structure st = draw_structure(config);
  const std::size_t frames = role == Role::train   ? config.train_frames
                             : role == Role::calib ? config.calib_frames
                                                   : config.test_frames;
  std::vector<std::string> ids(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    std::string n = std::to_string(f);
    ids[f] = to_string(role) + "-" + std::string(n.size() < 6 ? 6 - n.size() : 0, '0') + n;
  }
  std::vector<FrameOutput> outputs(frames);
  parallel_for(frames, config.workers,
               [&](std::size_t f) { outputs[f] = generate_frame(config, st, role, severity, f, ids[f]); });

  SynthSplit split;
  Dataset& ds = split.dataset;
  ds.class_names = default_class_names(config.num_classes);
  ds.feature_dim = config.feature_dim;
  ds.frames = ids;
  SynthTruth& t = split.truth;
  for (auto& o : outputs) {
    ds.detections.insert(ds.detections.end(), std::make_move_iterator(o.detections.begin()),
                         std::make_move_iterator(o.detections.end()));
    ds.ground_truths.insert(ds.ground_truths.end(), o.ground_truths.begin(), o.ground_truths.end());
    t.planted_tp.insert(t.planted_tp.end(), o.planted_tp.begin(), o.planted_tp.end());
    t.atypicality.insert(t.atypicality.end(), o.atypicality.begin(), o.atypicality.end());
  }
  t.seed = config.seed;
  t.role = role;
  t.severity = severity;
  t.temperature = config.temperature.empty() ? std::vector<double>(config.num_classes, 1.0) : config.temperature;
  t.inflation = config.inflation;
  t.feature_shift = config.feature_shift;
  for (std::size_t s = 0; s < kNumSeverities; ++s) t.shift_magnitude[s] = shift_magnitude(config, s);
  t.residual_inflation = config.residual_inflation;
  t.class_means = st.class_means;
  t.shift_direction = st.shift_direction;
  t.feature_scale = config.feature_scale;
  return split;
}

std::string truth_json(const SynthTruth& t) {
  nlohmann::json means = nlohmann::json::array();
  for (const auto& m : t.class_means) means.push_back(vec_json(m));
  std::size_t planted = 0;
  for (auto v : t.planted_tp) planted += v;
  const nlohmann::json j = {{"seed", t.seed},
                            {"role", to_string(t.role)},
                            {"severity", t.severity},
                            {"temperature", t.temperature},
                            {"inflation", t.inflation},
                            {"feature_shift", t.feature_shift},
                            {"shift_magnitude", t.shift_magnitude},
                            {"residual_inflation", t.residual_inflation},
                            {"feature_scale", t.feature_scale},
                            {"class_means", means},
                            {"shift_direction", vec_json(t.shift_direction)},
                            {"detections", t.planted_tp.size()},
                            {"planted_tp", planted}};
  return j.dump();
}

SynthOutput write_synthetic(const SynthConfig& config, std::size_t calib_severity, std::size_t test_severity,
                            const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const SynthSplit train = generate_split(config, Role::train, 0);
  const SynthSplit calib = generate_split(config, Role::calib, calib_severity);
  const SynthSplit test = generate_split(config, Role::test, test_severity);
  const Dataset val = concatenate(calib.dataset, test.dataset);

  SynthOutput out;
  out.train_prefix = dir / "train";
  out.val_prefix = dir / "val";
  out.truth_path = dir / "truth.json";
  save_dataset(train.dataset, out.train_prefix);
  save_dataset(val, out.val_prefix);
  out.train_detections = train.dataset.detections.size();
  out.val_detections = val.detections.size();

  const nlohmann::json j = {{"train", nlohmann::json::parse(truth_json(train.truth))},
                            {"calib", nlohmann::json::parse(truth_json(calib.truth))},
                            {"test", nlohmann::json::parse(truth_json(test.truth))},
                            {"calib_fraction", static_cast<double>(config.calib_frames) /
                                                   static_cast<double>(config.calib_frames + config.test_frames)}};
  std::ofstream f(out.truth_path);
  if (!f) throw ValidationError("cannot write " + out.truth_path.string());
  f << j.dump() << '\n';
  return out;
}

}  // namespace uqcal::synth
