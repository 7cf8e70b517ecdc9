#include "uqcal/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "uqcal/errors.hpp"
#include "uqcal/parallel.hpp"

namespace uqcal::optim {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double guarded(const Objective& f, std::span<const double> x) {
  const double v = f(x);
  return std::isfinite(v) ? v : kInf;
}

}  // namespace

DeResult differential_evolution(const Objective& objective, const DeConfig& config) {
  const std::size_t dim = config.bounds.size();
  if (dim == 0) throw ConfigError("differential_evolution: no bounds given");
  for (const auto& [lo, hi] : config.bounds) {
    if (!(lo < hi)) throw ConfigError("differential_evolution: every bound needs low < high");
  }
  const std::size_t pop =
      config.population_size > 0 ? config.population_size : std::max<std::size_t>(4, config.population_factor * dim);
  if (pop < 4) throw ConfigError("differential_evolution: population must be >= 4");
  if (config.max_evaluations < pop) throw ConfigError("differential_evolution: budget smaller than population");
  if (!(config.mutation > 0.0 && config.mutation < 2.0)) throw ConfigError("mutation factor must be in (0, 2)");
  if (!(config.crossover >= 0.0 && config.crossover <= 1.0)) throw ConfigError("crossover rate must be in [0, 1]");

  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto clip = [&](std::size_t d, double v) { return std::clamp(v, config.bounds[d].first, config.bounds[d].second); };

  std::vector<std::vector<double>> members(pop, std::vector<double>(dim));
  for (auto& m : members) {
    for (std::size_t d = 0; d < dim; ++d) {
      m[d] = config.bounds[d].first + unit(rng) * (config.bounds[d].second - config.bounds[d].first);
    }
  }
  for (std::size_t i = 0; i < std::min(pop, config.initial_points.size()); ++i) {
    if (config.initial_points[i].size() != dim) throw ConfigError("initial point has the wrong dimension");
    for (std::size_t d = 0; d < dim; ++d) members[i][d] = clip(d, config.initial_points[i][d]);
  }

  std::vector<double> values(pop);
  parallel_for(pop, config.workers, [&](std::size_t i) { values[i] = guarded(objective, members[i]); });

  DeResult result;
  result.evaluations = pop;
  auto best_index = [&] {
    return static_cast<std::size_t>(std::min_element(values.begin(), values.end()) - values.begin());
  };
  result.best_history.push_back(values[best_index()]);

  std::vector<std::vector<double>> trials(pop, std::vector<double>(dim));
  std::uniform_int_distribution<std::size_t> pick(0, pop - 1);
  std::uniform_int_distribution<std::size_t> pick_dim(0, dim - 1);
  std::vector<double> trial_values(pop);

  while (result.evaluations < config.max_evaluations &&
         (config.max_generations == 0 || result.generations < config.max_generations)) {
    const std::size_t batch = std::min(pop, config.max_evaluations - result.evaluations);
    // All random draws happen here, before any evaluation, so worker count
    // cannot change the sequence.
    for (std::size_t i = 0; i < batch; ++i) {
      std::size_t a, b, c;
      do a = pick(rng); while (a == i);
      do b = pick(rng); while (b == i || b == a);
      do c = pick(rng); while (c == i || c == a || c == b);
      const std::size_t forced = pick_dim(rng);
      for (std::size_t d = 0; d < dim; ++d) {
        const bool take = d == forced || unit(rng) < config.crossover;
        trials[i][d] = take ? clip(d, members[a][d] + config.mutation * (members[b][d] - members[c][d]))
                            : members[i][d];
      }
    }
    parallel_for(batch, config.workers, [&](std::size_t i) { trial_values[i] = guarded(objective, trials[i]); });
    for (std::size_t i = 0; i < batch; ++i) {
      if (trial_values[i] <= values[i]) {
        members[i].swap(trials[i]);
        values[i] = trial_values[i];
      }
    }
    result.evaluations += batch;
    result.generations += 1;
    result.best_history.push_back(values[best_index()]);
  }

  const std::size_t best = best_index();
  result.best_params = members[best];
  result.best_value = values[best];
  return result;
}

double linear_decay_rate(double base_rate, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base_rate;
  return base_rate * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

Adam::Adam(std::size_t num_params, const AdamConfig& config)
    : config_(config), m_(num_params, 0.0), v_(num_params, 0.0) {
  if (!(config.learning_rate > 0.0)) throw ConfigError("Adam learning rate must be > 0");
  if (!(config.beta1 >= 0.0 && config.beta1 < 1.0 && config.beta2 >= 0.0 && config.beta2 < 1.0)) {
    throw ConfigError("Adam betas must be in [0, 1)");
  }
}

void Adam::step(std::span<double> params, std::span<const double> grads, double learning_rate) {
  if (params.size() != m_.size() || grads.size() != m_.size()) throw ConfigError("Adam: size mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grads[i];
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grads[i] * grads[i];
    const double m_hat = m_[i] / bc1;
    const double v_hat = v_[i] / bc2;
    params[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + config_.epsilon);
  }
}

std::vector<double> adam_minimize(const BatchLossFn& loss, std::vector<double> params, std::size_t num_samples,
                                  const AdamConfig& config, AdamTrace* trace) {
  if (num_samples == 0) throw ConfigError("adam_minimize: no samples");
  if (config.batch_size == 0) throw ConfigError("adam_minimize: batch size must be >= 1");
  const std::size_t batches = (num_samples + config.batch_size - 1) / config.batch_size;
  const std::size_t total = batches * config.epochs;

  Adam adam(params.size(), config);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(num_samples);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> grad(params.size());

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double weighted = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(num_samples, begin + config.batch_size);
      const std::span<const std::size_t> batch(order.data() + begin, end - begin);
      std::fill(grad.begin(), grad.end(), 0.0);
      const double value = loss(params, batch, grad);
      if (!std::isfinite(value)) {
        throw NumericError("adam_minimize: non-finite loss at step " + std::to_string(step));
      }
      weighted += value * static_cast<double>(batch.size());
      const double lr = linear_decay_rate(config.learning_rate, step, total);
      if (trace != nullptr) trace->learning_rates.push_back(lr);
      adam.step(params, grad, lr);
      ++step;
    }
    if (trace != nullptr) trace->epoch_mean_loss.push_back(weighted / static_cast<double>(num_samples));
  }
  return params;
}

}  // namespace uqcal::optim
