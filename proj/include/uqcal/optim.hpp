#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

namespace uqcal::optim {

inline constexpr std::size_t kDefaultEvaluationBudget = 20000;

struct DeConfig {
  std::vector<std::pair<double, double>> bounds;  // per dimension (low, high)
  std::size_t population_size = 0;                // 0: population_factor * dim (at least 4)
  std::size_t population_factor = 15;
  std::size_t max_evaluations = kDefaultEvaluationBudget;  // total objective calls, initial population included
  std::size_t max_generations = 0;                         // 0: unlimited, only the evaluation budget applies
  double mutation = 0.7;                                   // F
  double crossover = 0.9;                                  // CR
  std::uint64_t seed = 0;
  std::vector<std::vector<double>> initial_points;  // replace the first members of the random population
  std::size_t workers = 1;                          // parallel objective evaluation within a generation
};

struct DeResult {
  std::vector<double> best_params;
  double best_value = 0.0;
  std::size_t evaluations = 0;
  std::size_t generations = 0;
  std::vector<double> best_history;  // best value after initialization and after each generation
};

using Objective = std::function<double(std::span<const double>)>;

/// Classic rand/1/bin Differential Evolution with clipping to the box and
/// greedy per-slot selection. Non-finite objective values count as +inf.
DeResult differential_evolution(const Objective& objective, const DeConfig& config);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t epochs = 60;
  std::size_t batch_size = 512;
  std::uint64_t seed = 0;
};

/// Learning rate at step t of a linear decay to zero over total_steps.
double linear_decay_rate(double base_rate, std::size_t step, std::size_t total_steps);

/// Adam state for one parameter vector.
class Adam {
 public:
  Adam(std::size_t num_params, const AdamConfig& config);

  /// One update with the given learning rate; gradients must match params in size.
  void step(std::span<double> params, std::span<const double> grads, double learning_rate);

  std::size_t steps_taken() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

/// Loss and gradient for the samples in `batch` (indices into the data set).
using BatchLossFn = std::function<double(std::span<const double> params, std::span<const std::size_t> batch,
                                         std::span<double> grad)>;

struct AdamTrace {
  std::vector<double> epoch_mean_loss;
  std::vector<double> learning_rates;  // per step
};

/// Mini-batch Adam over `num_samples` samples for config.epochs epochs with a
/// seeded shuffle per epoch and a linear learning-rate decay to zero.
/// Throws NumericError (with the step index) on a non-finite loss.
std::vector<double> adam_minimize(const BatchLossFn& loss, std::vector<double> params, std::size_t num_samples,
                                  const AdamConfig& config, AdamTrace* trace = nullptr);

}  // namespace uqcal::optim
