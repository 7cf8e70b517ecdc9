#include "uqcal/calib.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "uqcal/diagnostics.hpp"
#include "uqcal/errors.hpp"
#include "uqcal/math.hpp"
#include "uqcal/metrics.hpp"
#include "uqcal/optim.hpp"
#include "uqcal/parallel.hpp"

namespace uqcal::calib {
namespace {

using nlohmann::json;

std::atomic<std::size_t> g_floor_hits{0};

double floored(double v) {
  if (v < kVarianceFloor || std::isnan(v)) {
    g_floor_hits.fetch_add(1, std::memory_order_relaxed);
    return kVarianceFloor;
  }
  return v;
}

double clamp_probability(double p) { return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp); }

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

// Isotonic fit that also reports the fitted value of every input.
IsotonicStep isotonic_with_fitted(std::span<const double> inputs, std::span<const double> labels,
                                  std::vector<double>* fitted) {
  if (inputs.size() != labels.size()) throw ValidationError("isotonic fit: input lengths differ");
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return inputs[a] < inputs[b]; });

  IsotonicStep step;
  std::vector<double> means;
  std::vector<double> weights;
  std::vector<std::size_t> group_of(inputs.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    const std::size_t i = order[r];
    if (step.knots.empty() || inputs[i] != step.knots.back()) {
      step.knots.push_back(inputs[i]);
      means.push_back(0.0);
      weights.push_back(0.0);
    }
    means.back() += labels[i];
    weights.back() += 1.0;
    group_of[i] = step.knots.size() - 1;
  }
  for (std::size_t g = 0; g < means.size(); ++g) means[g] /= weights[g];
  step.values = pava(means, weights);
  if (fitted != nullptr) {
    fitted->resize(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) (*fitted)[i] = step.values[group_of[i]];
  }
  return step;
}

double mean_nll(std::span<const double> probabilities, std::span<const ClassificationSample> samples) {
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double p = clamp_probability(probabilities[i]);
    total -= samples[i].is_tp ? std::log(p) : std::log1p(-p);
  }
  return total / static_cast<double>(samples.size());
}

// Calibrated probabilities of a cell for a parameter vector.
void cls_probabilities(ClsMethod method, double gamma, std::span<const double> x,
                       std::span<const ClassificationSample> s, std::vector<double>& out) {
  out.resize(s.size());
  switch (method) {
    case ClsMethod::identity:
      for (std::size_t i = 0; i < s.size(); ++i) out[i] = sigmoid(s[i].logit);
      break;
    case ClsMethod::ts:
      for (std::size_t i = 0; i < s.size(); ++i) out[i] = apply_ts({x[0]}, s[i].logit);
      break;
    case ClsMethod::da_ts:
      for (std::size_t i = 0; i < s.size(); ++i) out[i] = apply_da_ts({x[0], x[1]}, gamma, s[i].logit, s[i].z_dens);
      break;
    case ClsMethod::ps:
      for (std::size_t i = 0; i < s.size(); ++i) out[i] = apply_ps({x[0], x[1]}, s[i].logit);
      break;
    case ClsMethod::da_ps:
      for (std::size_t i = 0; i < s.size(); ++i) {
        out[i] = apply_da_ps({x[0], x[1], x[2], x[3]}, gamma, s[i].logit, s[i].z_dens);
      }
      break;
    case ClsMethod::ir:
    case ClsMethod::da_ir: {
      std::vector<double> u(s.size());
      std::vector<double> y(s.size());
      for (std::size_t i = 0; i < s.size(); ++i) {
        u[i] = x[0] * s[i].score + x[1] * s[i].z_dens + x[2];
        y[i] = s[i].is_tp ? 1.0 : 0.0;
      }
      isotonic_with_fitted(u, y, &out);
      break;
    }
  }
}

std::vector<std::pair<double, double>> cls_bounds(ClsMethod method, const Bounds& b) {
  switch (method) {
    case ClsMethod::ts:
      return {b.temperature};
    case ClsMethod::da_ts:
      return {b.temperature, b.density_scale};
    case ClsMethod::ps:
      return {b.slope, b.shift};
    case ClsMethod::da_ps:
      return {b.slope, b.shift, b.density_scale, b.density_scale};
    case ClsMethod::da_ir:
      return {b.ir_weight, b.ir_weight, b.ir_weight};
    default:
      return {};
  }
}

std::vector<double> cls_identity(ClsMethod method) {
  switch (method) {
    case ClsMethod::ts:
      return {1.0};
    case ClsMethod::da_ts:
    case ClsMethod::ps:
      return {1.0, 0.0};
    case ClsMethod::da_ps:
      return {1.0, 0.0, 0.0, 0.0};
    default:
      return {1.0, 0.0, 0.0};
  }
}

ClsParams cls_params_from(ClsMethod method, std::span<const double> x, std::span<const ClassificationSample> s) {
  switch (method) {
    case ClsMethod::identity:
      return Identity{};
    case ClsMethod::ts:
      return TemperatureParams{x[0]};
    case ClsMethod::da_ts:
      return DaTemperatureParams{x[0], x[1]};
    case ClsMethod::ps:
      return PlattParams{x[0], x[1]};
    case ClsMethod::da_ps:
      return DaPlattParams{x[0], x[1], x[2], x[3]};
    case ClsMethod::ir:
    case ClsMethod::da_ir: {
      IsotonicParams p{x[0], x[1], x[2], {}};
      std::vector<double> u(s.size());
      std::vector<double> y(s.size());
      for (std::size_t i = 0; i < s.size(); ++i) {
        u[i] = p.w_s * s[i].score + p.w_d * s[i].z_dens + p.bias;
        y[i] = s[i].is_tp ? 1.0 : 0.0;
      }
      p.step = isotonic_with_fitted(u, y, nullptr);
      return p;
    }
  }
  return Identity{};
}

ClsParams fit_cls_cell(std::span<const ClassificationSample> s, ClsMethod method, const FitConfig& config,
                       std::size_t de_workers) {
  if (method == ClsMethod::identity) return Identity{};
  if (method == ClsMethod::ir) return cls_params_from(method, cls_identity(method), s);

  optim::DeConfig de;
  de.bounds = cls_bounds(method, config.bounds);
  de.max_evaluations = config.max_evaluations;
  de.population_factor = config.population_factor;
  de.seed = mix_seed(config.seed, 0);
  de.initial_points = {cls_identity(method)};
  de.workers = de_workers;
  const double gamma = config.gamma;
  const auto objective = [&](std::span<const double> x) {
    std::vector<double> p;
    cls_probabilities(method, gamma, x, s, p);
    return mean_nll(p, s);
  };
  const auto result = optim::differential_evolution(objective, de);
  return cls_params_from(method, result.best_params, s);
}

std::size_t cell_count(std::size_t num_classes, const std::vector<int>& present) {
  std::size_t n = num_classes;
  for (int c : present) n = std::max(n, static_cast<std::size_t>(c) + 1);
  return n;
}

// Regression objective data for one (cell, target).
struct RegCell {
  std::vector<double> residual;  // wrapped for yaw
  std::vector<double> value;
  std::vector<double> depth;
  std::vector<double> z;
};

double reg_value(RegMethod method, double gamma, std::span<const double> x, double value, double depth, double z) {
  switch (method) {
    case RegMethod::identity:
      return value;
    case RegMethod::ts:
      return apply_reg_ts({x[0]}, value);
    case RegMethod::da_ts:
      return apply_reg_da_ts({x[0], x[1], x[2]}, gamma, value, z);
    case RegMethod::depth:
      return apply_reg_depth({x[0], x[1]}, depth);
  }
  return value;
}

double reg_objective(RegMethod method, double gamma, std::size_t target, std::span<const double> x,
                     const RegCell& cell, const metrics::CoverageGrid& grid) {
  std::vector<double> standardized(cell.residual.size());
  for (std::size_t i = 0; i < standardized.size(); ++i) {
    const double v = reg_value(method, gamma, x, cell.value[i], cell.depth[i], cell.z[i]);
    standardized[i] = target == kNumRegressionTargets - 1 ? cell.residual[i] * std::sqrt(v)
                                                          : cell.residual[i] / std::sqrt(v);
  }
  return grid.area(standardized);
}

RegParams reg_params_from(RegMethod method, std::span<const double> x) {
  switch (method) {
    case RegMethod::identity:
      return Identity{};
    case RegMethod::ts:
      return RegTsParams{x[0]};
    case RegMethod::da_ts:
      return RegDaTsParams{x[0], x[1], x[2]};
    case RegMethod::depth:
      return DepthParams{x[0], x[1]};
  }
  return Identity{};
}

RegParams fit_reg_cell(const RegCell& cell, std::size_t target, RegMethod method, const FitConfig& config,
                       std::size_t de_workers) {
  optim::DeConfig de;
  de.max_evaluations = config.max_evaluations;
  de.population_factor = config.population_factor;
  de.seed = mix_seed(config.seed, target + 1);
  de.workers = de_workers;
  const Bounds& b = config.bounds;
  switch (method) {
    case RegMethod::identity:
      return Identity{};
    case RegMethod::ts:
      de.bounds = {b.temperature};
      de.initial_points = {{1.0}};
      break;
    case RegMethod::da_ts:
      de.bounds = {b.reg_scale, b.reg_bias, b.density_scale};
      de.initial_points = {{1.0, 0.0, 0.0}};
      break;
    case RegMethod::depth: {
      // The box scales with the magnitude of the predicted values.
      std::vector<double> sorted = cell.value;
      std::sort(sorted.begin(), sorted.end());
      const double m = std::max(sorted_quantile(sorted, 0.5), kVarianceFloor);
      const double dmax = std::max(*std::max_element(cell.depth.begin(), cell.depth.end()), 1e-6);
      de.bounds = {{-20.0 * m / dmax, 20.0 * m / dmax}, {0.0, 20.0 * m}};
      de.initial_points = {{0.0, m}};
      break;
    }
  }
  const metrics::CoverageGrid grid;
  const double gamma = config.gamma;
  const auto objective = [&](std::span<const double> x) {
    return reg_objective(method, gamma, target, x, cell, grid);
  };
  return reg_params_from(method, optim::differential_evolution(objective, de).best_params);
}

json cls_params_json(const ClsParams& p) {
  return std::visit(Overloaded{
                        [](const Identity&) { return json{{"identity", true}}; },
                        [](const TemperatureParams& t) { return json{{"temperature", t.temperature}}; },
                        [](const DaTemperatureParams& t) { return json{{"temperature", t.temperature}, {"s_t", t.s_t}}; },
                        [](const PlattParams& t) { return json{{"slope", t.slope}, {"shift", t.shift}}; },
                        [](const DaPlattParams& t) {
                          return json{{"slope", t.slope}, {"shift", t.shift}, {"s_scale", t.s_scale}, {"s_shift", t.s_shift}};
                        },
                        [](const IsotonicParams& t) {
                          return json{{"w_s", t.w_s},
                                      {"w_d", t.w_d},
                                      {"bias", t.bias},
                                      {"knots", t.step.knots},
                                      {"values", t.step.values}};
                        },
                    },
                    p);
}

ClsParams cls_params_from_json(ClsMethod method, const json& j) {
  if (j.value("identity", false)) return Identity{};
  switch (method) {
    case ClsMethod::identity:
      return Identity{};
    case ClsMethod::ts:
      return TemperatureParams{j.at("temperature").get<double>()};
    case ClsMethod::da_ts:
      return DaTemperatureParams{j.at("temperature").get<double>(), j.at("s_t").get<double>()};
    case ClsMethod::ps:
      return PlattParams{j.at("slope").get<double>(), j.at("shift").get<double>()};
    case ClsMethod::da_ps:
      return DaPlattParams{j.at("slope").get<double>(), j.at("shift").get<double>(), j.at("s_scale").get<double>(),
                           j.at("s_shift").get<double>()};
    case ClsMethod::ir:
    case ClsMethod::da_ir: {
      IsotonicParams p{j.at("w_s").get<double>(), j.at("w_d").get<double>(), j.at("bias").get<double>(), {}};
      p.step.knots = j.at("knots").get<std::vector<double>>();
      p.step.values = j.at("values").get<std::vector<double>>();
      if (p.step.knots.size() != p.step.values.size()) throw ValidationError("isotonic knots and values differ in length");
      return p;
    }
  }
  return Identity{};
}

json reg_params_json(const RegParams& p) {
  return std::visit(Overloaded{
                        [](const Identity&) { return json{{"identity", true}}; },
                        [](const RegTsParams& t) { return json{{"temperature", t.temperature}}; },
                        [](const RegDaTsParams& t) { return json{{"s", t.s}, {"b", t.b}, {"s_sigma", t.s_sigma}}; },
                        [](const DepthParams& t) { return json{{"a", t.a}, {"b", t.b}}; },
                    },
                    p);
}

RegParams reg_params_from_json(RegMethod method, const json& j) {
  if (j.value("identity", false)) return Identity{};
  switch (method) {
    case RegMethod::identity:
      return Identity{};
    case RegMethod::ts:
      return RegTsParams{j.at("temperature").get<double>()};
    case RegMethod::da_ts:
      return RegDaTsParams{j.at("s").get<double>(), j.at("b").get<double>(), j.at("s_sigma").get<double>()};
    case RegMethod::depth:
      return DepthParams{j.at("a").get<double>(), j.at("b").get<double>()};
  }
  return Identity{};
}

json cls_json(const ClassificationCalibrator& c) {
  json params = json::array();
  for (const auto& [k, p] : c.params) {
    json e = cls_params_json(p);
    e["class"] = k;
    params.push_back(e);
  }
  return {{"method", to_string(c.method)}, {"scope", to_string(c.scope)}, {"gamma", c.gamma}, {"params", params}};
}

json reg_json(const RegressionCalibrator& c) {
  json params = json::array();
  for (const auto& [k, targets] : c.params) {
    json t = json::array();
    for (const auto& p : targets) t.push_back(reg_params_json(p));
    params.push_back({{"class", k}, {"targets", t}});
  }
  return {{"method", to_string(c.method)}, {"scope", to_string(c.scope)}, {"gamma", c.gamma}, {"params", params}};
}

ClassificationCalibrator cls_from(const json& j) {
  ClassificationCalibrator c;
  c.method = parse_cls_method(j.at("method").get<std::string>());
  c.scope = parse_scope(j.at("scope").get<std::string>());
  c.gamma = j.at("gamma").get<double>();
  for (const auto& e : j.at("params")) c.params[e.at("class").get<int>()] = cls_params_from_json(c.method, e);
  return c;
}

RegressionCalibrator reg_from(const json& j) {
  RegressionCalibrator c;
  c.method = parse_reg_method(j.at("method").get<std::string>());
  c.scope = parse_scope(j.at("scope").get<std::string>());
  c.gamma = j.at("gamma").get<double>();
  for (const auto& e : j.at("params")) {
    const auto& t = e.at("targets");
    if (t.size() != kNumRegressionTargets) throw ValidationError("regression calibrator needs 7 targets per class");
    RegTargetParams targets;
    for (std::size_t k = 0; k < kNumRegressionTargets; ++k) targets[k] = reg_params_from_json(c.method, t[k]);
    c.params[e.at("class").get<int>()] = targets;
  }
  return c;
}

json parse_json(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string(what) + ": " + e.what(), 1);
  }
}

}  // namespace

double gain(double gamma, double x) { return 1.0 + gamma * std::tanh(x); }

double apply_ts(const TemperatureParams& p, double logit) { return sigmoid(logit / p.temperature); }

double apply_da_ts(const DaTemperatureParams& p, double gamma, double logit, double z_dens) {
  return sigmoid(logit / (p.temperature * gain(gamma, p.s_t * z_dens)));
}

double apply_ps(const PlattParams& p, double logit) { return sigmoid(p.slope * logit + p.shift); }

double apply_da_ps(const DaPlattParams& p, double gamma, double logit, double z_dens) {
  return sigmoid(p.slope * logit * gain(gamma, p.s_scale * z_dens) + p.shift * gain(gamma, p.s_shift * z_dens));
}

std::vector<double> pava(std::span<const double> values, std::span<const double> weights) {
  if (values.size() != weights.size()) throw ValidationError("pava: input lengths differ");
  struct Block {
    double sum;
    double weight;
    std::size_t count;
  };
  std::vector<Block> blocks;
  blocks.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(weights[i] > 0.0)) throw ValidationError("pava: weights must be > 0");
    blocks.push_back({values[i] * weights[i], weights[i], 1});
    while (blocks.size() > 1) {
      const Block& last = blocks.back();
      const Block& prev = blocks[blocks.size() - 2];
      if (prev.sum / prev.weight <= last.sum / last.weight) break;
      const Block merged{prev.sum + last.sum, prev.weight + last.weight, prev.count + last.count};
      blocks.pop_back();
      blocks.back() = merged;
    }
  }
  std::vector<double> out;
  out.reserve(values.size());
  for (const auto& b : blocks) out.insert(out.end(), b.count, b.sum / b.weight);
  return out;
}

IsotonicStep fit_isotonic(std::span<const double> inputs, std::span<const double> labels) {
  return isotonic_with_fitted(inputs, labels, nullptr);
}

double IsotonicStep::operator()(double u) const {
  if (knots.empty()) throw ConfigError("isotonic step function is not fitted");
  const auto it = std::upper_bound(knots.begin(), knots.end(), u);
  if (it == knots.begin()) return values.front();
  return values[static_cast<std::size_t>(it - knots.begin()) - 1];
}

double apply_ir(const IsotonicParams& p, double score) { return apply_da_ir(p, score, 0.0); }

double apply_da_ir(const IsotonicParams& p, double score, double z_dens) {
  return p.step(p.w_s * score + p.w_d * z_dens + p.bias);
}

double apply_reg_ts(const RegTsParams& p, double variance) { return variance / p.temperature; }

double apply_reg_depth(const DepthParams& p, double depth) { return floored(p.a * depth + p.b); }

double apply_reg_da_ts(const RegDaTsParams& p, double gamma, double variance, double z_dens) {
  return floored((p.s * variance + p.b) * gain(gamma, p.s_sigma * z_dens));
}

std::size_t variance_floor_count() { return g_floor_hits.load(); }

std::string to_string(ClsMethod m) {
  switch (m) {
    case ClsMethod::identity:
      return "identity";
    case ClsMethod::ts:
      return "ts";
    case ClsMethod::ps:
      return "ps";
    case ClsMethod::ir:
      return "ir";
    case ClsMethod::da_ts:
      return "da-ts";
    case ClsMethod::da_ps:
      return "da-ps";
    case ClsMethod::da_ir:
      return "da-ir";
  }
  return "identity";
}

std::string to_string(RegMethod m) {
  switch (m) {
    case RegMethod::identity:
      return "identity";
    case RegMethod::ts:
      return "ts";
    case RegMethod::da_ts:
      return "da-ts";
    case RegMethod::depth:
      return "depth";
  }
  return "identity";
}

std::string to_string(Scope s) { return s == Scope::global ? "global" : "class"; }

ClsMethod parse_cls_method(const std::string& name) {
  for (auto m : {ClsMethod::identity, ClsMethod::ts, ClsMethod::ps, ClsMethod::ir, ClsMethod::da_ts, ClsMethod::da_ps,
                 ClsMethod::da_ir}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown classification method '" + name + "'");
}

RegMethod parse_reg_method(const std::string& name) {
  for (auto m : {RegMethod::identity, RegMethod::ts, RegMethod::da_ts, RegMethod::depth}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown regression method '" + name + "'");
}

Scope parse_scope(const std::string& name) {
  if (name == "global") return Scope::global;
  if (name == "class" || name == "class-wise") return Scope::class_wise;
  throw ConfigError("unknown scope '" + name + "'");
}

const ClsParams& ClassificationCalibrator::params_for(int class_id) const {
  static const ClsParams identity = Identity{};
  const auto it = params.find(scope == Scope::global ? kGlobalKey : class_id);
  return it == params.end() ? identity : it->second;
}

double ClassificationCalibrator::calibrated_logit(int class_id, double logit, double score, double z_dens) const {
  const double g = gamma;
  return std::visit(Overloaded{
                        [&](const Identity&) { return logit; },
                        [&](const TemperatureParams& p) { return logit / p.temperature; },
                        [&](const DaTemperatureParams& p) { return logit / (p.temperature * gain(g, p.s_t * z_dens)); },
                        [&](const PlattParams& p) { return p.slope * logit + p.shift; },
                        [&](const DaPlattParams& p) {
                          return p.slope * logit * gain(g, p.s_scale * z_dens) + p.shift * gain(g, p.s_shift * z_dens);
                        },
                        [&](const IsotonicParams& p) { return uqcal::logit(clamp_probability(apply_da_ir(p, score, z_dens))); },
                    },
                    params_for(class_id));
}

double ClassificationCalibrator::probability(int class_id, double logit, double score, double z_dens) const {
  if (const auto* ir = std::get_if<IsotonicParams>(&params_for(class_id))) {
    return clamp_probability(apply_da_ir(*ir, score, z_dens));
  }
  return sigmoid(calibrated_logit(class_id, logit, score, z_dens));
}

const RegTargetParams* RegressionCalibrator::params_for(int class_id) const {
  const auto it = params.find(scope == Scope::global ? kGlobalKey : class_id);
  return it == params.end() ? nullptr : &it->second;
}

double RegressionCalibrator::value(int class_id, std::size_t target, double v, double depth, double z_dens) const {
  const RegTargetParams* p = params_for(class_id);
  if (p == nullptr) return v;
  const double g = gamma;
  return std::visit(Overloaded{
                        [&](const Identity&) { return v; },
                        [&](const RegTsParams& q) { return apply_reg_ts(q, v); },
                        [&](const RegDaTsParams& q) { return apply_reg_da_ts(q, g, v, z_dens); },
                        [&](const DepthParams& q) { return apply_reg_depth(q, depth); },
                    },
                    (*p)[target]);
}

ProbabilisticBox RegressionCalibrator::apply(const DetectionRecord& det, double z_dens) const {
  ProbabilisticBox box = det.box;
  for (std::size_t k = 0; k < 3; ++k) {
    box.center_var[k] = value(det.class_id, k, det.box.center_var[k], det.depth, z_dens);
    box.size_var[k] = value(det.class_id, k + 3, det.box.size_var[k], det.depth, z_dens);
  }
  box.yaw_kappa = value(det.class_id, 6, det.box.yaw_kappa, det.depth, z_dens);
  return box;
}

std::vector<ClassificationSample> classification_samples(const Dataset& dataset, std::span<const MatchResult> matches,
                                                         std::span<const double> z_dens) {
  std::vector<ClassificationSample> out;
  out.reserve(matches.size());
  for (const auto& m : matches) {
    const auto& d = dataset.detections.at(m.detection_index);
    out.push_back({d.class_id, d.logit, d.score, z_dens.empty() ? 0.0 : z_dens[m.detection_index], m.is_tp});
  }
  return out;
}

std::vector<RegressionSample> regression_samples(const Dataset& dataset, std::span<const MatchResult> matches,
                                                 std::span<const double> z_dens) {
  std::vector<RegressionSample> out;
  for (const auto& m : matches) {
    if (!m.is_tp || !m.residuals) continue;
    const auto& d = dataset.detections.at(m.detection_index);
    RegressionSample s;
    s.class_id = d.class_id;
    s.depth = d.depth;
    s.z_dens = z_dens.empty() ? 0.0 : z_dens[m.detection_index];
    for (std::size_t k = 0; k < 3; ++k) {
      s.predicted[k] = d.box.center[k];
      s.value[k] = d.box.center_var[k];
      s.predicted[k + 3] = d.box.size[k];
      s.value[k + 3] = d.box.size_var[k];
    }
    s.predicted[6] = d.box.yaw;
    s.value[6] = d.box.yaw_kappa;
    for (std::size_t k = 0; k < kNumRegressionTargets; ++k) s.target[k] = s.predicted[k] + (*m.residuals)[k];
    out.push_back(s);
  }
  return out;
}

double binary_nll(std::span<const double> probabilities, std::span<const ClassificationSample> samples) {
  if (probabilities.size() != samples.size()) throw ValidationError("binary_nll: input lengths differ");
  if (samples.empty()) return 0.0;
  return mean_nll(probabilities, samples);
}

ClassificationCalibrator fit_classification(std::span<const ClassificationSample> samples, ClsMethod method,
                                            const FitConfig& config) {
  ClassificationCalibrator out;
  out.method = method;
  out.scope = config.scope;
  out.gamma = config.gamma;
  if (config.scope == Scope::global) {
    if (samples.empty()) {
      warn("identity calibrator: calibration split has no detections");
      out.params[kGlobalKey] = Identity{};
      return out;
    }
    out.params[kGlobalKey] = fit_cls_cell(samples, method, config, config.workers);
    return out;
  }

  std::map<int, std::vector<ClassificationSample>> by_class;
  for (const auto& s : samples) by_class[s.class_id].push_back(s);
  std::vector<int> present;
  for (const auto& [c, v] : by_class) present.push_back(c);
  const std::size_t cells = cell_count(config.num_classes, present);
  std::vector<ClsParams> fitted(cells);
  parallel_for(cells, config.workers, [&](std::size_t c) {
    const auto it = by_class.find(static_cast<int>(c));
    if (it == by_class.end()) return;
    fitted[c] = fit_cls_cell(it->second, method, config, 1);
  });
  for (std::size_t c = 0; c < cells; ++c) {
    if (by_class.count(static_cast<int>(c)) == 0) warn("identity calibrator for class " + std::to_string(c));
    out.params[static_cast<int>(c)] = fitted[c];
  }
  return out;
}

RegressionCalibrator fit_regression(std::span<const RegressionSample> samples, RegMethod method,
                                    const FitConfig& config) {
  RegressionCalibrator out;
  out.method = method;
  out.scope = config.scope;
  out.gamma = config.gamma;

  std::map<int, std::vector<const RegressionSample*>> cells;
  if (config.scope == Scope::global) {
    auto& all = cells[kGlobalKey];
    for (const auto& s : samples) all.push_back(&s);
  } else {
    std::vector<int> present;
    for (const auto& s : samples) cells[s.class_id].push_back(&s);
    for (const auto& [c, v] : cells) present.push_back(c);
    const std::size_t n = cell_count(config.num_classes, present);
    for (std::size_t c = 0; c < n; ++c) cells[static_cast<int>(c)];
  }

  struct Job {
    int key;
    std::size_t target;
  };
  std::vector<Job> jobs;
  for (const auto& [key, members] : cells) {
    if (members.size() < config.min_regression_samples) {
      warn("identity regression calibrator for class " + std::to_string(key) + ": " +
           std::to_string(members.size()) + " TPs");
      continue;
    }
    for (std::size_t k = 0; k < kNumRegressionTargets; ++k) jobs.push_back({key, k});
  }

  std::vector<RegParams> fitted(jobs.size());
  parallel_for(jobs.size(), config.workers, [&](std::size_t j) {
    const auto& members = cells.at(jobs[j].key);
    const std::size_t k = jobs[j].target;
    RegCell cell;
    for (const RegressionSample* s : members) {
      const double r = s->target[k] - s->predicted[k];
      cell.residual.push_back(k == kNumRegressionTargets - 1 ? wrap_angle(r) : r);
      cell.value.push_back(s->value[k]);
      cell.depth.push_back(s->depth);
      cell.z.push_back(s->z_dens);
    }
    fitted[j] = fit_reg_cell(cell, k, method, config, 1);
  });

  for (const auto& [key, members] : cells) {
    RegTargetParams identity;
    identity.fill(Identity{});
    out.params[key] = identity;
  }
  for (std::size_t j = 0; j < jobs.size(); ++j) out.params[jobs[j].key][jobs[j].target] = fitted[j];
  return out;
}

Dataset apply_calibration(const Dataset& dataset, std::span<const double> z_dens,
                          const ClassificationCalibrator* classification, const RegressionCalibrator* regression) {
  if (!z_dens.empty() && z_dens.size() != dataset.detections.size()) {
    throw ValidationError("apply_calibration: z_dens length differs from the detection count");
  }
  Dataset out = dataset;
  for (std::size_t i = 0; i < out.detections.size(); ++i) {
    auto& d = out.detections[i];
    const double z = z_dens.empty() ? 0.0 : z_dens[i];
    if (classification != nullptr) {
      d.logit = classification->calibrated_logit(d.class_id, d.logit, d.score, z);
      d.score = sigmoid(d.logit);
    }
    if (regression != nullptr) d.box = regression->apply(d, z);
  }
  return out;
}

std::string to_json(const ClassificationCalibrator& c) { return cls_json(c).dump(); }
std::string to_json(const RegressionCalibrator& c) { return reg_json(c).dump(); }

ClassificationCalibrator classification_from_json(const std::string& text) {
  try {
    return cls_from(parse_json(text, "classification calibrator"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("classification calibrator: ") + e.what());
  }
}

RegressionCalibrator regression_from_json(const std::string& text) {
  try {
    return reg_from(parse_json(text, "regression calibrator"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("regression calibrator: ") + e.what());
  }
}

void save_calibrators(const CalibratorBundle& bundle, const std::filesystem::path& path) {
  json j = {{"format_version", kFormatVersion}};
  j["classification"] = bundle.classification ? cls_json(*bundle.classification) : json(nullptr);
  j["regression"] = bundle.regression ? reg_json(*bundle.regression) : json(nullptr);
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << j.dump() << '\n';
}

CalibratorBundle load_calibrators(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const json j = parse_json(ss.str(), path.string().c_str());
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kFormatVersion) throw ValidationError("unsupported calibrator format_version " + std::to_string(version));
    CalibratorBundle b;
    if (!j.at("classification").is_null()) b.classification = cls_from(j.at("classification"));
    if (!j.at("regression").is_null()) b.regression = reg_from(j.at("regression"));
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

}  // namespace uqcal::calib
