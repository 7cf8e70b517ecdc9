#include "uqcal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Cholesky>

#include "uqcal/diagnostics.hpp"
#include "uqcal/errors.hpp"
#include "uqcal/math.hpp"

namespace uqcal::metrics {
namespace {

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ValidationError(std::string(what) + ": input lengths differ");
}

void check_score(double s) {
  if (!(s >= 0.0 && s <= 1.0)) throw ValidationError("scores must lie in [0, 1]");
}

double binned_gap(const std::vector<BinStats>& bins, bool location_aware) {
  double total = 0.0;
  for (const auto& b : bins) {
    if (b.count == 0) continue;
    const double target = location_aware ? b.mean_location_quality : b.precision;
    total += b.weight * std::abs(b.mean_confidence - target);
  }
  return total;
}

}  // namespace

std::size_t bin_of(double score, std::size_t num_bins) {
  const auto b = static_cast<std::size_t>(std::floor(score * static_cast<double>(num_bins)));
  return std::min(b, num_bins - 1);
}

double location_quality(bool is_tp, double distance, double tau) {
  if (!is_tp) return 0.0;
  return 1.0 - std::min(distance, tau) / tau;
}

std::vector<BinStats> reliability_bins(std::span<const double> scores, std::span<const std::uint8_t> is_tp,
                                       std::span<const double> distances, double tau, std::size_t num_bins) {
  check_lengths(scores.size(), is_tp.size(), "reliability_bins");
  if (!distances.empty()) check_lengths(scores.size(), distances.size(), "reliability_bins");
  if (num_bins == 0) throw ConfigError("num_bins must be >= 1");
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");

  std::vector<BinStats> bins(num_bins);
  std::vector<double> conf_sum(num_bins, 0.0);
  std::vector<double> lq_sum(num_bins, 0.0);
  std::vector<std::size_t> tp_count(num_bins, 0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    check_score(scores[i]);
    const std::size_t b = bin_of(scores[i], num_bins);
    bins[b].count += 1;
    conf_sum[b] += scores[i];
    if (is_tp[i] != 0) {
      tp_count[b] += 1;
      if (!distances.empty()) lq_sum[b] += location_quality(true, distances[i], tau);
    }
  }
  const auto n = static_cast<double>(scores.size());
  for (std::size_t b = 0; b < num_bins; ++b) {
    BinStats& s = bins[b];
    s.bin_index = b;
    if (s.count == 0) continue;
    const auto c = static_cast<double>(s.count);
    s.mean_confidence = conf_sum[b] / c;
    s.precision = static_cast<double>(tp_count[b]) / c;
    s.mean_location_quality = lq_sum[b] / c;
    s.weight = c / n;
  }
  return bins;
}

double d_ece(std::span<const double> scores, std::span<const std::uint8_t> is_tp, std::size_t num_bins) {
  if (scores.empty()) {
    warn("d_ece: empty input, defined as 0");
    return 0.0;
  }
  return binned_gap(reliability_bins(scores, is_tp, {}, 1.0, num_bins), false);
}

double la_ece(std::span<const double> scores, std::span<const std::uint8_t> is_tp, std::span<const double> distances,
              double tau, std::size_t num_bins) {
  if (scores.empty()) {
    warn("la_ece: empty input, defined as 0");
    return 0.0;
  }
  check_lengths(scores.size(), distances.size(), "la_ece");
  return binned_gap(reliability_bins(scores, is_tp, distances, tau, num_bins), true);
}

double la_ace(std::span<const double> scores, std::span<const std::uint8_t> is_tp, std::span<const double> distances,
              double tau) {
  if (scores.empty()) {
    warn("la_ace: empty input, defined as 0");
    return 0.0;
  }
  check_lengths(scores.size(), is_tp.size(), "la_ace");
  check_lengths(scores.size(), distances.size(), "la_ace");
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    check_score(scores[i]);
    total += std::abs(scores[i] - location_quality(is_tp[i] != 0, distances[i], tau));
  }
  return total / static_cast<double>(scores.size());
}

CoverageGrid::CoverageGrid(std::size_t num_levels) {
  if (num_levels < 2) throw ConfigError("MCA needs at least 2 levels");
  levels_.resize(num_levels);
  half_widths_.resize(num_levels);
  for (std::size_t k = 0; k < num_levels; ++k) {
    const double p = (static_cast<double>(k) + 0.5) / static_cast<double>(num_levels);
    levels_[k] = p;
    half_widths_[k] = normal_quantile(0.5 + 0.5 * p);
  }
}

std::vector<double> CoverageGrid::coverage(std::span<const double> standardized) const {
  const std::size_t levels = half_widths_.size();
  // first[k] counts residuals whose smallest covering level is k; level k
  // covers |r| iff |r| <= s(p_k), and s is increasing in k.
  std::vector<std::size_t> first(levels + 1, 0);
  for (double r : standardized) {
    const double a = std::abs(r);
    const auto it = std::lower_bound(half_widths_.begin(), half_widths_.end(), a);
    first[static_cast<std::size_t>(it - half_widths_.begin())] += 1;
  }
  std::vector<double> cov(levels, 0.0);
  const auto n = static_cast<double>(standardized.size());
  std::size_t running = 0;
  for (std::size_t k = 0; k < levels; ++k) {
    running += first[k];
    cov[k] = n > 0 ? static_cast<double>(running) / n : 0.0;
  }
  return cov;
}

double CoverageGrid::area(std::span<const double> standardized) const {
  const std::vector<double> cov = coverage(standardized);
  double total = 0.0;
  for (std::size_t k = 0; k < cov.size(); ++k) total += std::abs(cov[k] - levels_[k]);
  return total / static_cast<double>(cov.size());
}

namespace {

std::vector<double> standardized_residuals(std::span<const double> mus, std::span<const double> sigmas,
                                           std::span<const double> targets, bool angular) {
  check_lengths(mus.size(), sigmas.size(), "mca");
  check_lengths(mus.size(), targets.size(), "mca");
  std::vector<double> r(mus.size());
  for (std::size_t i = 0; i < mus.size(); ++i) {
    if (!(sigmas[i] > 0.0)) throw ValidationError("mca: sigma[" + std::to_string(i) + "] must be > 0");
    const double diff = angular ? wrap_angle(targets[i] - mus[i]) : targets[i] - mus[i];
    r[i] = diff / sigmas[i];
  }
  return r;
}

}  // namespace

double mca(std::span<const double> mus, std::span<const double> sigmas, std::span<const double> targets,
           std::size_t num_levels) {
  if (mus.empty()) {
    warn("mca: empty input, defined as 0");
    return 0.0;
  }
  return CoverageGrid(num_levels).area(standardized_residuals(mus, sigmas, targets, false));
}

double mca_angular(std::span<const double> mus, std::span<const double> kappas, std::span<const double> targets,
                   std::size_t num_levels) {
  if (mus.empty()) {
    warn("mca_angular: empty input, defined as 0");
    return 0.0;
  }
  std::vector<double> sigmas(kappas.size());
  for (std::size_t i = 0; i < kappas.size(); ++i) {
    if (!(kappas[i] > 0.0)) throw ValidationError("mca_angular: kappa[" + std::to_string(i) + "] must be > 0");
    sigmas[i] = 1.0 / std::sqrt(kappas[i]);
  }
  return CoverageGrid(num_levels).area(standardized_residuals(mus, sigmas, targets, true));
}

std::vector<CoveragePoint> coverage_curve(std::span<const double> mus, std::span<const double> sigmas,
                                          std::span<const double> targets, std::size_t num_levels) {
  const CoverageGrid grid(num_levels);
  const std::vector<double> cov = grid.coverage(standardized_residuals(mus, sigmas, targets, false));
  std::vector<CoveragePoint> out(cov.size());
  for (std::size_t k = 0; k < cov.size(); ++k) out[k] = {grid.levels()[k], cov[k]};
  return out;
}

double ks_chi2_statistic(std::vector<double> squared_distances, double dof) {
  if (squared_distances.empty()) {
    warn("ks_realism: empty input, defined as 0");
    return 0.0;
  }
  std::sort(squared_distances.begin(), squared_distances.end());
  const auto n = static_cast<double>(squared_distances.size());
  double sup = 0.0;
  for (std::size_t i = 0; i < squared_distances.size(); ++i) {
    const double f = chi2_cdf(squared_distances[i], dof);
    sup = std::max({sup, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return 100.0 * sup;
}

double ks_realism(std::span<const Eigen::VectorXd> mus, std::span<const Eigen::MatrixXd> covs,
                  std::span<const Eigen::VectorXd> targets) {
  check_lengths(mus.size(), covs.size(), "ks_realism");
  check_lengths(mus.size(), targets.size(), "ks_realism");
  if (mus.empty()) return ks_chi2_statistic({}, 1.0);
  const auto dim = mus.front().size();
  std::vector<double> m2(mus.size());
  for (std::size_t i = 0; i < mus.size(); ++i) {
    if (mus[i].size() != dim || targets[i].size() != dim || covs[i].rows() != dim || covs[i].cols() != dim) {
      throw ValidationError("ks_realism: inconsistent dimensions at index " + std::to_string(i));
    }
    const Eigen::LLT<Eigen::MatrixXd> llt(covs[i]);
    if (llt.info() != Eigen::Success) {
      throw ValidationError("ks_realism: covariance " + std::to_string(i) + " is not positive definite");
    }
    const Eigen::VectorXd w = llt.matrixL().solve(targets[i] - mus[i]);
    m2[i] = w.squaredNorm();
  }
  return ks_chi2_statistic(std::move(m2), static_cast<double>(dim));
}

}  // namespace uqcal::metrics
