#include "uqcal/flow.hpp"

#include <cmath>
#include <random>
#include <string>
#include <type_traits>

#include "uqcal/diagnostics.hpp"
#include "uqcal/errors.hpp"
#include "uqcal/math.hpp"

namespace uqcal::density {
namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

const double kHalfLog2Pi = 0.5 * std::log(kTwoPi);

template <typename T>
struct Net {
  using Mat = std::conditional_t<std::is_const_v<T>, const MatrixXd, MatrixXd>;
  using Vec = std::conditional_t<std::is_const_v<T>, const VectorXd, VectorXd>;
  Eigen::Map<Mat> w1;
  Eigen::Map<Vec> b1;
  Eigen::Map<Mat> w2;
  Eigen::Map<Vec> b2;

  Net(T* p, Index half, Index hidden)
      : w1(p, hidden, half),
        b1(p + hidden * half, hidden),
        w2(p + hidden * half + hidden, half, hidden),
        b2(p + 2 * hidden * half + hidden, half) {}

  static std::size_t size(Index half, Index hidden) {
    return static_cast<std::size_t>(2 * hidden * half + hidden + half);
  }
};

struct BlockCache {
  MatrixXd xc;
  MatrixXd xt;
  MatrixXd hs;
  MatrixXd ht;
  MatrixXd squashed;  // tanh of the raw scale output
  MatrixXd s;
};

struct Geometry {
  Index half;
  Index hidden;
  std::size_t net_size;

  Index transformed_offset(std::size_t block) const { return block % 2 == 0 ? half : 0; }
  Index conditioning_offset(std::size_t block) const { return block % 2 == 0 ? 0 : half; }
};

MatrixXd hidden_layer(const Net<const double>& net, const MatrixXd& xc) {
  MatrixXd a = net.w1 * xc;
  a.colwise() += net.b1;
  return a.array().tanh().matrix();
}

MatrixXd output_layer(const Net<const double>& net, const MatrixXd& h) {
  MatrixXd o = net.w2 * h;
  o.colwise() += net.b2;
  return o;
}

// Runs every block in the given direction, updating z in place and adding
// the log-determinant contribution per column to log_det.
void run_blocks(const double* params, const Geometry& g, std::size_t num_blocks, double bound, MatrixXd& z,
                VectorXd& log_det, Direction direction, std::vector<BlockCache>* caches) {
  for (std::size_t step = 0; step < num_blocks; ++step) {
    const std::size_t b = direction == Direction::forward ? step : num_blocks - 1 - step;
    const double* base = params + b * 2 * g.net_size;
    const Net<const double> scale_net(base, g.half, g.hidden);
    const Net<const double> shift_net(base + g.net_size, g.half, g.hidden);

    MatrixXd xc = z.middleRows(g.conditioning_offset(b), g.half);
    MatrixXd hs = hidden_layer(scale_net, xc);
    MatrixXd squashed = output_layer(scale_net, hs).array().tanh().matrix();
    MatrixXd s = bound * squashed;
    MatrixXd ht = hidden_layer(shift_net, xc);
    const MatrixXd t = output_layer(shift_net, ht);

    auto zt = z.middleRows(g.transformed_offset(b), g.half);
    if (direction == Direction::forward) {
      if (caches != nullptr) {
        BlockCache& c = (*caches)[b];
        c.xt = zt;
        c.xc = std::move(xc);
        c.hs = std::move(hs);
        c.ht = std::move(ht);
        c.squashed = std::move(squashed);
      }
      zt = (zt.array() * s.array().exp() + t.array()).matrix();
      log_det += s.colwise().sum().transpose();
    } else {
      zt = ((zt - t).array() * (-s.array()).exp()).matrix();
      log_det -= s.colwise().sum().transpose();
    }
    if (caches != nullptr) (*caches)[b].s = std::move(s);
    if (!z.allFinite()) throw NumericError("flow block " + std::to_string(b) + " produced non-finite values");
  }
}

}  // namespace

double base_log_density(const VectorXd& x) {
  return -static_cast<double>(x.size()) * kHalfLog2Pi - 0.5 * x.squaredNorm();
}

double base_log_density(const VectorXd& x, const VectorXd& mean, const VectorXd& var) {
  if (mean.size() != x.size() || var.size() != x.size()) throw ConfigError("base_log_density: dimension mismatch");
  double total = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    const double d = x[i] - mean[i];
    total += -kHalfLog2Pi - 0.5 * std::log(var[i]) - 0.5 * d * d / var[i];
  }
  return total;
}

FlowModel::FlowModel(std::size_t dim, std::size_t num_blocks, std::size_t hidden, double scale_bound)
    : dim_(dim), num_blocks_(num_blocks), hidden_(hidden), scale_bound_(scale_bound) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("flow dimension must be even and positive, got " + std::to_string(dim));
  if (hidden == 0) throw ConfigError("flow hidden width must be >= 1");
  if (!(scale_bound > 0.0)) throw ConfigError("flow scale bound must be > 0");
  params_.assign(num_blocks * parameters_per_block(), 0.0);
  shift_ = VectorXd::Zero(static_cast<Index>(dim));
  scale_ = VectorXd::Ones(static_cast<Index>(dim));
}

std::size_t FlowModel::parameters_per_block() const {
  return 2 * Net<double>::size(static_cast<Index>(dim_ / 2), static_cast<Index>(hidden_));
}

void FlowModel::initialize_hidden(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto half = static_cast<Index>(dim_ / 2);
  const auto hidden = static_cast<Index>(hidden_);
  const double limit = 1.0 / std::sqrt(static_cast<double>(half));
  std::uniform_real_distribution<double> u(-limit, limit);
  const std::size_t net_size = Net<double>::size(half, hidden);
  for (std::size_t b = 0; b < num_blocks_; ++b) {
    for (int which = 0; which < 2; ++which) {
      Net<double> net(params_.data() + (2 * b + static_cast<std::size_t>(which)) * net_size, half, hidden);
      for (Index i = 0; i < net.w1.size(); ++i) net.w1.data()[i] = u(rng);
      for (Index i = 0; i < net.b1.size(); ++i) net.b1[i] = u(rng);
    }
  }
}

void FlowModel::set_input_standardization(VectorXd shift, VectorXd scale) {
  if (shift.size() != static_cast<Index>(dim_) || scale.size() != static_cast<Index>(dim_)) {
    throw ConfigError("flow standardization has the wrong dimension");
  }
  for (Index i = 0; i < scale.size(); ++i) {
    if (!(scale[i] > 0.0)) throw ConfigError("flow standardization scale must be > 0");
  }
  shift_ = std::move(shift);
  scale_ = std::move(scale);
}

VectorXd FlowModel::transform(const VectorXd& x, Direction direction, double* log_det) const {
  if (x.size() != static_cast<Index>(dim_)) throw ConfigError("flow input has the wrong dimension");
  MatrixXd z = x;
  VectorXd ld = VectorXd::Zero(1);
  const Geometry g{static_cast<Index>(dim_ / 2), static_cast<Index>(hidden_),
                   Net<double>::size(static_cast<Index>(dim_ / 2), static_cast<Index>(hidden_))};
  run_blocks(params_.data(), g, num_blocks_, scale_bound_, z, ld, direction, nullptr);
  if (log_det != nullptr) *log_det = ld[0];
  return z.col(0);
}

MatrixXd FlowModel::standardize(const MatrixXd& samples) const {
  return ((samples.colwise() - shift_).array().colwise() / scale_.array()).matrix();
}

VectorXd FlowModel::log_density(const MatrixXd& samples) const {
  if (samples.rows() != static_cast<Index>(dim_)) throw ConfigError("flow input has the wrong dimension");
  MatrixXd z = standardize(samples);
  VectorXd ld = VectorXd::Constant(samples.cols(), -scale_.array().log().sum());
  const Geometry g{static_cast<Index>(dim_ / 2), static_cast<Index>(hidden_),
                   Net<double>::size(static_cast<Index>(dim_ / 2), static_cast<Index>(hidden_))};
  run_blocks(params_.data(), g, num_blocks_, scale_bound_, z, ld, Direction::forward, nullptr);
  const VectorXd sq = z.colwise().squaredNorm().transpose();
  return (ld.array() - static_cast<double>(dim_) * kHalfLog2Pi - 0.5 * sq.array()).matrix();
}

double FlowModel::log_density(const VectorXd& x) const { return log_density(MatrixXd(x))[0]; }

double FlowModel::nll_and_gradient(std::span<const double> params, const MatrixXd& standardized,
                                   std::span<double> grad) const {
  const Index half = static_cast<Index>(dim_ / 2);
  const auto hidden = static_cast<Index>(hidden_);
  const Geometry g{half, hidden, Net<double>::size(half, hidden)};
  const Index n = standardized.cols();
  const auto inv_n = 1.0 / static_cast<double>(n);

  MatrixXd z = standardized;
  VectorXd ld = VectorXd::Zero(n);
  std::vector<BlockCache> caches(num_blocks_);
  run_blocks(params.data(), g, num_blocks_, scale_bound_, z, ld, Direction::forward, &caches);

  const double loss = (0.5 * z.colwise().squaredNorm().transpose().array() - ld.array()).mean() +
                      static_cast<double>(dim_) * kHalfLog2Pi;

  // d loss / d z_out = z / n; d loss / d log_det = -1 / n per column
  MatrixXd gz = z * inv_n;
  for (std::size_t step = 0; step < num_blocks_; ++step) {
    const std::size_t b = num_blocks_ - 1 - step;
    const BlockCache& c = caches[b];
    const double* base = params.data() + b * 2 * g.net_size;
    const Net<const double> scale_net(base, half, hidden);
    const Net<const double> shift_net(base + g.net_size, half, hidden);
    Net<double> g_scale(grad.data() + b * 2 * g.net_size, half, hidden);
    Net<double> g_shift(grad.data() + b * 2 * g.net_size + g.net_size, half, hidden);

    const MatrixXd gyt = gz.middleRows(g.transformed_offset(b), half);
    const Eigen::ArrayXXd es = c.s.array().exp();

    const MatrixXd gs = ((gyt.array() * c.xt.array() * es) - inv_n).matrix();
    const MatrixXd graw = (gs.array() * scale_bound_ * (1.0 - c.squashed.array().square())).matrix();
    g_scale.w2.noalias() += graw * c.hs.transpose();
    g_scale.b2 += graw.rowwise().sum();
    const MatrixXd gas = ((scale_net.w2.transpose() * graw).array() * (1.0 - c.hs.array().square())).matrix();
    g_scale.w1.noalias() += gas * c.xc.transpose();
    g_scale.b1 += gas.rowwise().sum();

    g_shift.w2.noalias() += gyt * c.ht.transpose();
    g_shift.b2 += gyt.rowwise().sum();
    const MatrixXd gat = ((shift_net.w2.transpose() * gyt).array() * (1.0 - c.ht.array().square())).matrix();
    g_shift.w1.noalias() += gat * c.xc.transpose();
    g_shift.b1 += gat.rowwise().sum();

    MatrixXd gxc = gz.middleRows(g.conditioning_offset(b), half);
    gxc.noalias() += scale_net.w1.transpose() * gas;
    gxc.noalias() += shift_net.w1.transpose() * gat;
    gz.middleRows(g.transformed_offset(b), half) = (gyt.array() * es).matrix();
    gz.middleRows(g.conditioning_offset(b), half) = gxc;
  }
  return loss;
}

FlowModel fit_flow(std::span<const VectorXd> features, const FlowConfig& config, optim::AdamTrace* trace) {
  if (features.empty()) throw ConfigError("fit_flow: no samples");
  const auto dim = static_cast<std::size_t>(features.front().size());
  FlowModel model(dim, config.num_blocks, config.hidden, config.scale_bound);
  model.initialize_hidden(config.seed);

  MatrixXd data(static_cast<Index>(dim), static_cast<Index>(features.size()));
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != static_cast<Index>(dim)) throw ConfigError("fit_flow: inconsistent feature dimension");
    data.col(static_cast<Index>(i)) = features[i];
  }
  if (config.standardize_inputs) {
    const VectorXd mean = data.rowwise().mean();
    VectorXd sd = ((data.colwise() - mean).array().square().rowwise().mean()).sqrt().matrix();
    for (Index i = 0; i < sd.size(); ++i) {
      if (!(sd[i] > 1e-12)) sd[i] = 1.0;
    }
    model.set_input_standardization(mean, sd);
  }
  const MatrixXd standardized = model.standardize(data);
  const double pre_log_det = model.input_scale().array().log().sum();

  auto loss = [&](std::span<const double> params, std::span<const std::size_t> batch, std::span<double> grad) {
    MatrixXd cols(standardized.rows(), static_cast<Index>(batch.size()));
    for (std::size_t j = 0; j < batch.size(); ++j) cols.col(static_cast<Index>(j)) = standardized.col(static_cast<Index>(batch[j]));
    return model.nll_and_gradient(params, cols, grad) + pre_log_det;
  };
  optim::AdamConfig adam = config.adam;
  model.parameters() = optim::adam_minimize(loss, model.parameters(), features.size(), adam, trace);
  return model;
}

}  // namespace uqcal::density
