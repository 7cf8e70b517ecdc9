#include "uqcal/density.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "uqcal/diagnostics.hpp"
#include "uqcal/errors.hpp"
#include "uqcal/math.hpp"
#include "uqcal/parallel.hpp"

namespace uqcal::density {
namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

constexpr std::size_t kChunk = 1024;

VectorXd estimator_log_densities(const Estimator& estimator, const MatrixXd& samples) {
  if (const auto* flow = std::get_if<FlowModel>(&estimator)) return flow->log_density(samples);
  const auto& gmm = std::get<GmmModel>(estimator);
  VectorXd out(samples.cols());
  for (Index i = 0; i < samples.cols(); ++i) out[i] = gmm.log_density(samples.col(i));
  return out;
}

// Query log-densities of the columns of `samples`, predicted classes given per column.
std::vector<double> query_log_densities(const DensityModel& model, std::span<const int> classes,
                                        const MatrixXd& samples) {
  const Index n = samples.cols();
  std::map<int, VectorXd> per_class;
  for (const auto& [c, est] : model.estimators) per_class.emplace(c, estimator_log_densities(est, samples));
  std::vector<double> out(static_cast<std::size_t>(n));
  std::vector<double> terms;
  for (Index i = 0; i < n; ++i) {
    const int c = classes[static_cast<std::size_t>(i)];
    const auto own = per_class.find(c);
    if (model.class_conditional && own != per_class.end()) {
      out[static_cast<std::size_t>(i)] = own->second[i];
      continue;
    }
    terms.clear();
    for (const auto& [k, values] : per_class) terms.push_back(values[i] + model.log_priors.at(k));
    out[static_cast<std::size_t>(i)] = log_sum_exp(terms);
  }
  return out;
}

MatrixXd stack_columns(std::span<const VectorXd> vectors) {
  MatrixXd m(vectors.front().size(), static_cast<Index>(vectors.size()));
  for (std::size_t i = 0; i < vectors.size(); ++i) m.col(static_cast<Index>(i)) = vectors[i];
  return m;
}

QuantileRange quantiles_of(std::vector<double> values, double low, double high) {
  std::sort(values.begin(), values.end());
  return {sorted_quantile(values, low), sorted_quantile(values, high)};
}

Estimator fit_class(const std::vector<VectorXd>& features, int class_id, const DensityConfig& config) {
  const std::uint64_t seed = mix_seed(config.seed, static_cast<std::uint64_t>(class_id));
  if (features.size() < config.min_samples_per_class) {
    warn("class " + std::to_string(class_id) + " has " + std::to_string(features.size()) +
         " training samples, using a single Gaussian");
    GmmConfig single = config.gmm;
    single.components = 1;
    single.diagonal = true;
    single.seed = seed;
    return fit_gmm(features, single);
  }
  if (config.kind == EstimatorKind::gmm) {
    GmmConfig gmm = config.gmm;
    gmm.seed = seed;
    return fit_gmm(features, gmm);
  }
  FlowConfig flow = config.flow;
  flow.seed = seed;
  flow.adam.seed = mix_seed(seed, 1);
  return fit_flow(features, flow);
}

std::vector<double> to_vector(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }

VectorXd to_eigen(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size()));
}

json estimator_json(const Estimator& estimator) {
  if (const auto* flow = std::get_if<FlowModel>(&estimator)) {
    return {{"type", "flow"},
            {"dim", flow->dim()},
            {"num_blocks", flow->num_blocks()},
            {"hidden", flow->hidden()},
            {"scale_bound", flow->scale_bound()},
            {"input_shift", to_vector(flow->input_shift())},
            {"input_scale", to_vector(flow->input_scale())},
            {"parameters", flow->parameters()}};
  }
  const auto& gmm = std::get<GmmModel>(estimator);
  json j = {{"type", "gmm"}, {"diagonal", gmm.diagonal()}, {"weights", gmm.weights()}};
  json means = json::array();
  for (const auto& m : gmm.means()) means.push_back(to_vector(m));
  j["means"] = means;
  if (gmm.diagonal()) {
    json vars = json::array();
    for (const auto& v : gmm.variances()) vars.push_back(to_vector(v));
    j["variances"] = vars;
  } else {
    json covs = json::array();
    for (const auto& c : gmm.covariances()) {
      json rows = json::array();
      for (Index r = 0; r < c.rows(); ++r) rows.push_back(to_vector(c.row(r).transpose()));
      covs.push_back(rows);
    }
    j["covariances"] = covs;
  }
  return j;
}

Estimator estimator_from_json(const json& j) {
  const auto type = j.at("type").get<std::string>();
  if (type == "flow") {
    FlowModel flow(j.at("dim").get<std::size_t>(), j.at("num_blocks").get<std::size_t>(),
                   j.at("hidden").get<std::size_t>(), j.at("scale_bound").get<double>());
    flow.set_input_standardization(to_eigen(j.at("input_shift")), to_eigen(j.at("input_scale")));
    auto params = j.at("parameters").get<std::vector<double>>();
    if (params.size() != flow.parameters().size()) throw ValidationError("flow parameter count mismatch");
    flow.parameters() = std::move(params);
    return flow;
  }
  if (type == "gmm") {
    auto weights = j.at("weights").get<std::vector<double>>();
    std::vector<VectorXd> means;
    for (const auto& m : j.at("means")) means.push_back(to_eigen(m));
    if (j.at("diagonal").get<bool>()) {
      std::vector<VectorXd> vars;
      for (const auto& v : j.at("variances")) vars.push_back(to_eigen(v));
      return GmmModel(std::move(weights), std::move(means), std::move(vars));
    }
    std::vector<MatrixXd> covs;
    for (const auto& c : j.at("covariances")) {
      MatrixXd m(static_cast<Index>(c.size()), static_cast<Index>(c.size()));
      for (std::size_t r = 0; r < c.size(); ++r) m.row(static_cast<Index>(r)) = to_eigen(c[r]).transpose();
      covs.push_back(m);
    }
    return GmmModel(std::move(weights), std::move(means), std::move(covs));
  }
  throw ValidationError("unknown estimator type '" + type + "'");
}

}  // namespace

double estimator_log_density(const Estimator& estimator, const VectorXd& x) {
  return std::visit([&](const auto& e) { return e.log_density(x); }, estimator);
}

double DensityModel::class_log_density(int class_id, const VectorXd& z) const {
  const auto it = estimators.find(class_id);
  if (it == estimators.end()) throw ConfigError("no density estimator for class " + std::to_string(class_id));
  return estimator_log_density(it->second, z);
}

double DensityModel::marginal_log_density(const VectorXd& z) const {
  std::vector<double> terms;
  for (const auto& [c, est] : estimators) terms.push_back(estimator_log_density(est, z) + log_priors.at(c));
  return log_sum_exp(terms);
}

double DensityModel::query_log_density(int class_id, const VectorXd& z) const {
  if (class_conditional && estimators.count(class_id) != 0) return class_log_density(class_id, z);
  return marginal_log_density(z);
}

const QuantileRange& DensityModel::quantile_range(int class_id) const {
  const auto it = quantiles.find(class_id);
  if (it != quantiles.end()) return it->second;
  const auto global = quantiles.find(kGlobalKey);
  if (global == quantiles.end()) throw ConfigError("density model has no normalization quantiles");
  return global->second;
}

const StandardizationStats& DensityModel::stats(int class_id) const {
  const auto it = calib_stats.find(class_id);
  if (it != calib_stats.end()) return it->second;
  const auto global = calib_stats.find(kGlobalKey);
  if (global == calib_stats.end()) throw ConfigError("density model has no calibration statistics");
  return global->second;
}

double DensityModel::normalize(int class_id, double log_q) const {
  const QuantileRange& q = quantile_range(class_id);
  const double width = q.high - q.low;
  if (!(width > 0.0)) {
    warn("zero-width normalization range for class " + std::to_string(class_id));
    return 0.5;
  }
  return std::clamp((log_q - q.low) / width, 0.0, 1.0);
}

double DensityModel::standardize(int class_id, double normalized) const {
  const StandardizationStats& s = stats(class_id);
  if (!(s.stddev > 0.0)) {
    warn("zero calibration spread for class " + std::to_string(class_id));
    return 0.0;
  }
  return (normalized - s.mean) / s.stddev;
}

std::map<int, std::vector<VectorXd>> true_positive_features(const Dataset& dataset, double tau, std::size_t workers) {
  const auto matches = match_dataset(dataset, tau, {}, workers);
  std::map<int, std::vector<VectorXd>> out;
  for (const auto& m : matches) {
    if (!m.is_tp) continue;
    const auto& det = dataset.detections[m.detection_index];
    out[det.class_id].push_back(
        Eigen::Map<const VectorXd>(det.query_feature.data(), static_cast<Index>(det.query_feature.size())));
  }
  return out;
}

DensityModel fit_density(const Dataset& train, const DensityConfig& config) {
  return fit_density(true_positive_features(train, config.match_threshold, config.workers), train.num_classes(),
                     config);
}

DensityModel fit_density(const std::map<int, std::vector<VectorXd>>& features_by_class, std::size_t num_classes,
                         const DensityConfig& config) {
  DensityModel model;
  model.num_classes = num_classes;
  model.class_conditional = config.class_conditional;

  std::vector<int> classes;
  std::size_t total = 0;
  for (const auto& [c, f] : features_by_class) {
    if (f.empty()) continue;
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
      throw ValidationError("fit_density: class " + std::to_string(c) + " out of range");
    }
    classes.push_back(c);
    total += f.size();
    model.feature_dim = static_cast<std::size_t>(f.front().size());
  }
  if (classes.empty()) throw ValidationError("fit_density: no training samples");
  for (int c = 0; c < static_cast<int>(num_classes); ++c) {
    if (features_by_class.count(c) == 0 || features_by_class.at(c).empty()) {
      warn("class " + std::to_string(c) + " has no training samples, no density estimator");
    }
  }

  std::vector<Estimator> fitted(classes.size());
  parallel_for(classes.size(), config.workers, [&](std::size_t i) {
    fitted[i] = fit_class(features_by_class.at(classes[i]), classes[i], config);
  });
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const auto n = static_cast<double>(features_by_class.at(classes[i]).size());
    model.estimators.emplace(classes[i], std::move(fitted[i]));
    model.log_priors[classes[i]] = std::log(n / static_cast<double>(total));
  }

  std::vector<std::vector<double>> per_class(classes.size());
  parallel_for(classes.size(), config.workers, [&](std::size_t i) {
    const auto& f = features_by_class.at(classes[i]);
    const std::vector<int> ids(f.size(), classes[i]);
    per_class[i] = query_log_densities(model, ids, stack_columns(f));
  });
  std::vector<double> pooled;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    model.quantiles[classes[i]] = quantiles_of(per_class[i], config.low_quantile, config.high_quantile);
    pooled.insert(pooled.end(), per_class[i].begin(), per_class[i].end());
  }
  model.quantiles[kGlobalKey] = quantiles_of(pooled, config.low_quantile, config.high_quantile);
  model.calib_stats[kGlobalKey] = {};
  return model;
}

std::vector<double> normalized_log_densities(const DensityModel& model, const Dataset& dataset, std::size_t workers) {
  const std::size_t n = dataset.detections.size();
  if (n > 0 && dataset.feature_dim != model.feature_dim) {
    throw ValidationError("dataset feature_dim " + std::to_string(dataset.feature_dim) +
                          " does not match density model " + std::to_string(model.feature_dim));
  }
  std::vector<double> out(n);
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  parallel_for(chunks, workers, [&](std::size_t ch) {
    const std::size_t begin = ch * kChunk;
    const std::size_t end = std::min(n, begin + kChunk);
    MatrixXd samples(static_cast<Index>(model.feature_dim), static_cast<Index>(end - begin));
    std::vector<int> classes(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      const auto& f = dataset.detections[i].query_feature;
      samples.col(static_cast<Index>(i - begin)) = Eigen::Map<const VectorXd>(f.data(), static_cast<Index>(f.size()));
      classes[i - begin] = dataset.detections[i].class_id;
    }
    const auto logq = query_log_densities(model, classes, samples);
    for (std::size_t i = begin; i < end; ++i) out[i] = model.normalize(classes[i - begin], logq[i - begin]);
  });
  return out;
}

void set_calibration_stats(DensityModel& model, const Dataset& calibration, std::size_t workers) {
  const auto normalized = normalized_log_densities(model, calibration, workers);
  if (normalized.empty()) throw ValidationError("set_calibration_stats: calibration split has no detections");
  std::map<int, std::vector<double>> by_class;
  for (std::size_t i = 0; i < normalized.size(); ++i) by_class[calibration.detections[i].class_id].push_back(normalized[i]);
  model.calib_stats.clear();
  model.calib_stats[kGlobalKey] = {mean(normalized), population_stddev(normalized)};
  for (const auto& [c, values] : by_class) model.calib_stats[c] = {mean(values), population_stddev(values)};
}

std::vector<double> compute_z_dens(const DensityModel& model, const Dataset& dataset, std::size_t workers) {
  auto values = normalized_log_densities(model, dataset, workers);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = model.standardize(dataset.detections[i].class_id, values[i]);
  return values;
}

std::string to_json(const DensityModel& model) {
  json classes = json::array();
  for (const auto& [c, est] : model.estimators) {
    classes.push_back({{"class", c}, {"log_prior", model.log_priors.at(c)}, {"estimator", estimator_json(est)}});
  }
  json quantiles = json::array();
  for (const auto& [c, q] : model.quantiles) quantiles.push_back({{"class", c}, {"low", q.low}, {"high", q.high}});
  json stats = json::array();
  for (const auto& [c, s] : model.calib_stats) stats.push_back({{"class", c}, {"mean", s.mean}, {"stddev", s.stddev}});
  const json j = {{"format_version", kFormatVersion},
                  {"feature_dim", model.feature_dim},
                  {"num_classes", model.num_classes},
                  {"class_conditional", model.class_conditional},
                  {"classes", classes},
                  {"quantiles", quantiles},
                  {"calib_stats", stats}};
  return j.dump();
}

DensityModel density_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("density model: ") + e.what(), 1);
  }
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kFormatVersion) throw ValidationError("unsupported density format_version " + std::to_string(version));
    DensityModel model;
    model.feature_dim = j.at("feature_dim").get<std::size_t>();
    model.num_classes = j.at("num_classes").get<std::size_t>();
    model.class_conditional = j.at("class_conditional").get<bool>();
    for (const auto& c : j.at("classes")) {
      const int id = c.at("class").get<int>();
      model.estimators.emplace(id, estimator_from_json(c.at("estimator")));
      model.log_priors[id] = c.at("log_prior").get<double>();
    }
    for (const auto& q : j.at("quantiles")) {
      model.quantiles[q.at("class").get<int>()] = {q.at("low").get<double>(), q.at("high").get<double>()};
    }
    for (const auto& s : j.at("calib_stats")) {
      model.calib_stats[s.at("class").get<int>()] = {s.at("mean").get<double>(), s.at("stddev").get<double>()};
    }
    return model;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("density model: ") + e.what());
  }
}

void save_density(const DensityModel& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << to_json(model) << '\n';
}

DensityModel load_density(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return density_from_json(ss.str());
}

}  // namespace uqcal::density
