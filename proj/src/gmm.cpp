#include "uqcal/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include <Eigen/Cholesky>

#include "uqcal/errors.hpp"
#include "uqcal/math.hpp"

namespace uqcal::density {
namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::vector<std::size_t> kmeanspp_centers(std::span<const VectorXd> x, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> centers;
  std::uniform_int_distribution<std::size_t> first(0, x.size() - 1);
  centers.push_back(first(rng));
  std::vector<double> d2(x.size(), std::numeric_limits<double>::infinity());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (centers.size() < k) {
    const VectorXd& last = x[centers.back()];
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      d2[i] = std::min(d2[i], (x[i] - last).squaredNorm());
      total += d2[i];
    }
    std::size_t chosen = x.size() - 1;
    if (total > 0.0) {
      double target = unit(rng) * total;
      for (std::size_t i = 0; i < x.size(); ++i) {
        target -= d2[i];
        if (target < 0.0) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = first(rng);
    }
    centers.push_back(chosen);
  }
  return centers;
}

struct Stats {
  std::vector<double> weights;
  std::vector<VectorXd> means;
  std::vector<VectorXd> variances;
  std::vector<MatrixXd> covariances;
};

// M-step from a responsibility matrix (samples x components).
GmmModel m_step(std::span<const VectorXd> x, const MatrixXd& resp, const GmmConfig& config,
                const std::vector<std::size_t>& fallback_centers, const VectorXd& global_var) {
  const auto n = static_cast<Index>(x.size());
  const auto dim = x.front().size();
  const Index k = resp.cols();
  std::vector<double> weights(static_cast<std::size_t>(k));
  std::vector<VectorXd> means(static_cast<std::size_t>(k));
  std::vector<VectorXd> variances;
  std::vector<MatrixXd> covariances;
  for (Index c = 0; c < k; ++c) {
    const double nk = resp.col(c).sum();
    const auto ci = static_cast<std::size_t>(c);
    if (nk < 1e-10) {
      weights[ci] = 1e-10;
      means[ci] = x[fallback_centers[ci]];
      if (config.diagonal) {
        variances.push_back(global_var);
      } else {
        covariances.push_back(global_var.asDiagonal());
      }
      continue;
    }
    weights[ci] = nk / static_cast<double>(n);
    VectorXd mean = VectorXd::Zero(dim);
    for (Index i = 0; i < n; ++i) mean += resp(i, c) * x[static_cast<std::size_t>(i)];
    mean /= nk;
    means[ci] = mean;
    if (config.diagonal) {
      VectorXd var = VectorXd::Zero(dim);
      for (Index i = 0; i < n; ++i) var += resp(i, c) * (x[static_cast<std::size_t>(i)] - mean).array().square().matrix();
      var /= nk;
      variances.push_back(var.cwiseMax(config.covariance_floor));
    } else {
      MatrixXd cov = MatrixXd::Zero(dim, dim);
      for (Index i = 0; i < n; ++i) {
        const VectorXd d = x[static_cast<std::size_t>(i)] - mean;
        cov.noalias() += resp(i, c) * d * d.transpose();
      }
      cov /= nk;
      for (Index j = 0; j < dim; ++j) cov(j, j) = std::max(cov(j, j), config.covariance_floor);
      covariances.push_back(cov);
    }
  }
  double total = 0.0;
  for (double w : weights) total += w;
  for (double& w : weights) w /= total;
  if (config.diagonal) return GmmModel(std::move(weights), std::move(means), std::move(variances));
  return GmmModel(std::move(weights), std::move(means), std::move(covariances));
}

}  // namespace

GmmModel::GmmModel(std::vector<double> weights, std::vector<VectorXd> means, std::vector<VectorXd> variances)
    : diagonal_(true), weights_(std::move(weights)), means_(std::move(means)), variances_(std::move(variances)) {
  prepare();
}

GmmModel::GmmModel(std::vector<double> weights, std::vector<VectorXd> means, std::vector<MatrixXd> covariances)
    : diagonal_(false), weights_(std::move(weights)), means_(std::move(means)), covariances_(std::move(covariances)) {
  prepare();
}

void GmmModel::prepare() {
  const std::size_t k = weights_.size();
  if (k == 0 || means_.size() != k || (diagonal_ ? variances_.size() : covariances_.size()) != k) {
    throw ConfigError("GmmModel: component arrays differ in length");
  }
  const double half_log_2pi = 0.5 * std::log(kTwoPi);
  const auto dim = means_.front().size();
  log_weights_.resize(k);
  log_norm_.resize(k);
  cholesky_.clear();
  for (std::size_t c = 0; c < k; ++c) {
    if (!(weights_[c] > 0.0)) throw ValidationError("GmmModel: weights must be > 0");
    log_weights_[c] = std::log(weights_[c]);
    if (means_[c].size() != dim) throw ValidationError("GmmModel: inconsistent dimensions");
    double log_det = 0.0;
    if (diagonal_) {
      if (variances_[c].size() != dim || !(variances_[c].array() > 0.0).all()) {
        throw ValidationError("GmmModel: variances must be positive");
      }
      log_det = variances_[c].array().log().sum();
    } else {
      const Eigen::LLT<MatrixXd> llt(covariances_[c]);
      if (llt.info() != Eigen::Success) throw ValidationError("GmmModel: covariance is not positive definite");
      cholesky_.push_back(llt.matrixL());
      log_det = 2.0 * cholesky_.back().diagonal().array().log().sum();
    }
    log_norm_[c] = -static_cast<double>(dim) * half_log_2pi - 0.5 * log_det;
  }
}

VectorXd GmmModel::component_log_densities(const VectorXd& x) const {
  VectorXd out(static_cast<Index>(weights_.size()));
  for (std::size_t c = 0; c < weights_.size(); ++c) {
    double m2 = 0.0;
    if (diagonal_) {
      m2 = ((x - means_[c]).array().square() / variances_[c].array()).sum();
    } else {
      m2 = cholesky_[c].triangularView<Eigen::Lower>().solve(x - means_[c]).squaredNorm();
    }
    out[static_cast<Index>(c)] = log_norm_[c] - 0.5 * m2;
  }
  return out;
}

double GmmModel::log_density(const VectorXd& x) const {
  if (x.size() != static_cast<Index>(dim())) throw ConfigError("GmmModel: input has the wrong dimension");
  VectorXd terms = component_log_densities(x);
  for (std::size_t c = 0; c < weights_.size(); ++c) terms[static_cast<Index>(c)] += log_weights_[c];
  return log_sum_exp(std::span<const double>(terms.data(), static_cast<std::size_t>(terms.size())));
}

GmmModel fit_gmm(std::span<const VectorXd> features, const GmmConfig& config, GmmFitInfo* info) {
  if (config.components == 0) throw ConfigError("fit_gmm: K must be >= 1");
  if (features.size() < config.components) {
    throw ConfigError("fit_gmm: " + std::to_string(features.size()) + " samples for " +
                      std::to_string(config.components) + " components");
  }
  const auto n = static_cast<Index>(features.size());
  const auto k = static_cast<Index>(config.components);
  const auto dim = features.front().size();
  for (const auto& f : features) {
    if (f.size() != dim) throw ConfigError("fit_gmm: inconsistent feature dimension");
  }

  VectorXd mean = VectorXd::Zero(dim);
  for (const auto& f : features) mean += f;
  mean /= static_cast<double>(n);
  VectorXd global_var = VectorXd::Zero(dim);
  for (const auto& f : features) global_var += (f - mean).array().square().matrix();
  global_var = (global_var / static_cast<double>(n)).cwiseMax(config.covariance_floor);

  std::mt19937_64 rng(config.seed);
  const std::vector<std::size_t> centers = kmeanspp_centers(features, config.components, rng);

  MatrixXd resp = MatrixXd::Zero(n, k);
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Index c = 0; c < k; ++c) {
      const double d = (features[static_cast<std::size_t>(i)] - features[centers[static_cast<std::size_t>(c)]]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    resp(i, best) = 1.0;
  }
  GmmModel model = m_step(features, resp, config, centers, global_var);

  GmmFitInfo local;
  GmmFitInfo& out = info != nullptr ? *info : local;
  out = {};
  std::vector<double> terms(static_cast<std::size_t>(k));
  for (std::size_t iter = 0; iter < config.max_iterations; ++iter) {
    double ll = 0.0;
    for (Index i = 0; i < n; ++i) {
      const VectorXd comp = model.component_log_densities(features[static_cast<std::size_t>(i)]);
      for (Index c = 0; c < k; ++c) terms[static_cast<std::size_t>(c)] = comp[c] + std::log(model.weights()[static_cast<std::size_t>(c)]);
      const double lse = log_sum_exp(terms);
      ll += lse;
      for (Index c = 0; c < k; ++c) resp(i, c) = std::exp(terms[static_cast<std::size_t>(c)] - lse);
    }
    ll /= static_cast<double>(n);
    out.log_likelihood.push_back(ll);
    out.iterations = iter + 1;
    if (iter > 0 && ll - out.log_likelihood[iter - 1] < config.tolerance) {
      out.converged = true;
      break;
    }
    model = m_step(features, resp, config, centers, global_var);
  }
  return model;
}

}  // namespace uqcal::density
