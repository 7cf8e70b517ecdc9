#include "uqcal/report.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "uqcal/errors.hpp"
#include "uqcal/math.hpp"
#include "uqcal/parallel.hpp"

namespace uqcal::report {
namespace {

using nlohmann::json;

std::vector<std::uint8_t> keep_mask(const Dataset& ds, double min_score) {
  std::vector<std::uint8_t> keep(ds.detections.size());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = ds.detections[i].score >= min_score ? 1 : 0;
  return keep;
}

double variance(const DetectionRecord& d, std::size_t k) {
  if (k < 3) return d.box.center_var[k];
  if (k < 6) return d.box.size_var[k - 3];
  return 1.0 / d.box.yaw_kappa;
}

std::vector<double> standardized(const Dataset& ds, std::span<const MatchResult> matches, int class_id,
                                 std::size_t k) {
  std::vector<double> out;
  for (const auto& m : matches) {
    const auto& d = ds.detections[m.detection_index];
    if (!m.is_tp || (class_id >= 0 && d.class_id != class_id)) continue;
    out.push_back((*m.residuals)[k] / std::sqrt(variance(d, k)));
  }
  return out;
}

void add_mean(MetricMap& sum, std::map<std::string, std::size_t>& count, const MetricMap& values) {
  for (const auto& [k, v] : values) {
    sum[k] += v;
    count[k] += 1;
  }
}

MetricMap finish_mean(MetricMap sum, const std::map<std::string, std::size_t>& count) {
  for (auto& [k, v] : sum) v /= static_cast<double>(count.at(k));
  return sum;
}

const std::vector<std::string> kCountKeys{"detections", "true_positives"};

bool is_count(const std::string& key) { return std::find(kCountKeys.begin(), kCountKeys.end(), key) != kCountKeys.end(); }

json metric_json(const MetricMap& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

std::vector<double> default_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 12; ++i) t.push_back(0.05 * i);
  return t;
}

std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  auto to_double = [&](const std::string& s) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw ConfigError("bad threshold '" + s + "'");
      return v;
    } catch (const std::logic_error&) {
      throw ConfigError("bad threshold '" + s + "'");
    }
  };
  if (text.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ':')) parts.push_back(part);
    if (parts.size() != 3) throw ConfigError("thresholds range must be start:stop:step");
    const double start = to_double(parts[0]);
    const double stop = to_double(parts[1]);
    const double step = to_double(parts[2]);
    if (!(step > 0.0)) throw ConfigError("thresholds step must be > 0");
    const auto n = static_cast<long>(std::floor((stop - start) / step + 1e-9));
    for (long i = 0; i <= n; ++i) out.push_back(std::round((start + static_cast<double>(i) * step) * 1e12) / 1e12);
  } else {
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(to_double(part));
  }
  if (out.empty()) throw ConfigError("no thresholds given");
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (!(out[i] > out[i - 1])) throw ConfigError("thresholds must be strictly ascending");
  }
  for (double t : out) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("thresholds must lie in [0, 1]");
  }
  return out;
}

MetricMap class_metrics(const Dataset& ds, std::span<const MatchResult> matches, int class_id,
                        const ReportConfig& config) {
  std::vector<double> scores;
  std::vector<std::uint8_t> tp;
  std::vector<double> dist;
  std::vector<const MatchResult*> tps;
  for (const auto& m : matches) {
    const auto& d = ds.detections[m.detection_index];
    if (d.class_id != class_id) continue;
    scores.push_back(d.score);
    tp.push_back(m.is_tp ? 1 : 0);
    dist.push_back(m.center_distance.value_or(0.0));
    if (m.is_tp) tps.push_back(&m);
  }
  MetricMap out;
  out["detections"] = static_cast<double>(scores.size());
  out["true_positives"] = static_cast<double>(tps.size());
  if (scores.empty()) return out;
  out["d_ece"] = metrics::d_ece(scores, tp, config.classification_bins);
  out["la_ece"] = metrics::la_ece(scores, tp, dist, config.tau, config.classification_bins);
  out["la_ace"] = metrics::la_ace(scores, tp, dist, config.tau);
  if (tps.empty()) return out;

  const metrics::CoverageGrid grid(config.coverage_levels);
  double xyz = 0.0;
  std::vector<double> pooled;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto r = standardized(ds, matches, class_id, k);
    if (config.pool_xyz) {
      pooled.insert(pooled.end(), r.begin(), r.end());
    } else {
      xyz += grid.area(r) / 3.0;
    }
  }
  out["mca_xyz"] = config.pool_xyz ? grid.area(pooled) : xyz;
  double lwh = 0.0;
  for (std::size_t k = 3; k < 6; ++k) lwh += grid.area(standardized(ds, matches, class_id, k)) / 3.0;
  out["mca_lwh"] = lwh;
  out["mca_yaw"] = grid.area(standardized(ds, matches, class_id, 6));

  std::vector<double> m2;
  for (const MatchResult* m : tps) {
    const auto& d = ds.detections[m->detection_index];
    double s = 0.0;
    for (std::size_t k = 0; k < 3; ++k) s += (*m->residuals)[k] * (*m->residuals)[k] / d.box.center_var[k];
    m2.push_back(s);
  }
  out["ks_xyz"] = metrics::ks_chi2_statistic(std::move(m2), 3.0);
  return out;
}

CalibrationReport classwise_threshold_report(const Dataset& ds, const ReportConfig& config) {
  if (config.thresholds.empty()) throw ConfigError("report needs at least one threshold");
  for (std::size_t i = 1; i < config.thresholds.size(); ++i) {
    if (!(config.thresholds[i] > config.thresholds[i - 1])) throw ConfigError("thresholds must be strictly ascending");
  }
  CalibrationReport report;
  report.config = config;
  report.class_names = ds.class_names;
  report.per_threshold.resize(config.thresholds.size());

  parallel_for(config.thresholds.size(), config.workers, [&](std::size_t ti) {
    ThresholdReport& tr = report.per_threshold[ti];
    tr.threshold = config.thresholds[ti];
    const auto keep = keep_mask(ds, tr.threshold);
    const auto matches = match_dataset(ds, config.tau, keep, 1);
    MetricMap sum;
    std::map<std::string, std::size_t> count;
    for (int c = 0; c < static_cast<int>(ds.num_classes()); ++c) {
      MetricMap m = class_metrics(ds, matches, c, config);
      if (m.at("detections") == 0.0) continue;
      MetricMap rates;
      for (const auto& [k, v] : m) {
        if (!is_count(k)) rates[k] = v;
      }
      add_mean(sum, count, rates);
      tr.per_class[c] = std::move(m);
    }
    tr.class_mean = finish_mean(sum, count);
  });

  MetricMap agg_sum;
  std::map<std::string, std::size_t> agg_count;
  std::map<int, MetricMap> class_sum;
  std::map<int, std::map<std::string, std::size_t>> class_count;
  for (const auto& tr : report.per_threshold) {
    add_mean(agg_sum, agg_count, tr.class_mean);
    for (const auto& [c, m] : tr.per_class) {
      MetricMap rates;
      for (const auto& [k, v] : m) {
        if (!is_count(k)) rates[k] = v;
      }
      add_mean(class_sum[c], class_count[c], rates);
    }
  }
  report.aggregates = finish_mean(agg_sum, agg_count);
  for (auto& [c, s] : class_sum) report.per_class[c] = finish_mean(s, class_count[c]);
  return report;
}

std::string report_json(const CalibrationReport& r, bool timestamp) {
  auto name = [&](int c) {
    return c >= 0 && static_cast<std::size_t>(c) < r.class_names.size() ? r.class_names[static_cast<std::size_t>(c)]
                                                                         : std::to_string(c);
  };
  json per_threshold = json::array();
  for (const auto& tr : r.per_threshold) {
    json pc = json::object();
    for (const auto& [c, m] : tr.per_class) pc[name(c)] = metric_json(m);
    per_threshold.push_back({{"threshold", tr.threshold}, {"per_class", pc}, {"class_mean", metric_json(tr.class_mean)}});
  }
  json per_class = json::object();
  for (const auto& [c, m] : r.per_class) per_class[name(c)] = metric_json(m);

  json j = {{"config",
             {{"classification_bins", r.config.classification_bins},
              {"coverage_levels", r.config.coverage_levels},
              {"tau", r.config.tau},
              {"thresholds", r.config.thresholds},
              {"pool_xyz", r.config.pool_xyz},
              {"classes", r.class_names}}},
            {"results",
             {{"per_threshold", per_threshold}, {"per_class", per_class}, {"aggregates", metric_json(r.aggregates)}}}};
  if (timestamp) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    j["generated_at"] = os.str();
  }
  return j.dump(2);
}

std::string reliability_csv(const Dataset& ds, double min_score, const ReportConfig& config) {
  std::vector<double> scores;
  std::vector<std::uint8_t> tp;
  const auto keep = keep_mask(ds, min_score);
  for (const auto& m : match_dataset(ds, config.tau, keep, config.workers)) {
    scores.push_back(ds.detections[m.detection_index].score);
    tp.push_back(m.is_tp ? 1 : 0);
  }
  std::ostringstream os;
  os << "bin_low,bin_high,mean_conf,precision,weight\n";
  const auto bins = metrics::reliability_bins(scores, tp, {}, config.tau, config.classification_bins);
  const auto b = static_cast<double>(config.classification_bins);
  for (const auto& s : bins) {
    os << fmt(static_cast<double>(s.bin_index) / b) << ',' << fmt(static_cast<double>(s.bin_index + 1) / b) << ','
       << fmt(s.mean_confidence) << ',' << fmt(s.precision) << ',' << fmt(s.weight) << '\n';
  }
  return os.str();
}

std::string coverage_csv(const Dataset& ds, double min_score, CoverageGroup group, const ReportConfig& config) {
  const auto keep = keep_mask(ds, min_score);
  const auto matches = match_dataset(ds, config.tau, keep, config.workers);
  std::vector<double> pooled;
  const std::size_t first = group == CoverageGroup::xyz ? 0 : group == CoverageGroup::lwh ? 3 : 6;
  const std::size_t last = group == CoverageGroup::yaw ? 7 : first + 3;
  for (std::size_t k = first; k < last; ++k) {
    const auto r = standardized(ds, matches, -1, k);
    pooled.insert(pooled.end(), r.begin(), r.end());
  }
  const metrics::CoverageGrid grid(config.coverage_levels);
  const auto cov = grid.coverage(pooled);
  std::ostringstream os;
  os << "p,empirical_coverage\n";
  for (std::size_t i = 0; i < cov.size(); ++i) os << fmt(grid.levels()[i]) << ',' << fmt(cov[i]) << '\n';
  return os.str();
}

}  // namespace uqcal::report
