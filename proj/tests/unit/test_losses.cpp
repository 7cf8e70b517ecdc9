#include <doctest.h>

#include <cmath>
#include <random>
#include <utility>

#include "uqcal/errors.hpp"
#include "uqcal/losses.hpp"
#include "uqcal/math.hpp"

using namespace uqcal;
using namespace uqcal::losses;

namespace {

// log I0(x), 40-digit mpmath evaluation
const std::pair<double, double> kLogI0[] = {
    {0.0, 0.0},
    {1e-3, 2.499999843750017465192269e-7},
    {0.5, 0.06154971918548130394128457},
    {1.0, 0.2359143585071786486894148},
    {2.0, 0.8239935414829562829313378},
    {5.0, 3.304681775822533433845831},
    {7.9, 5.964623228612125090613023},
    {8.0, 6.058104255427813945360018},
    {8.1, 6.151669590894812729503635},
    {10.0, 7.942972083118695554494865},
    {20.0, 17.58961042824427429080055},
    {29.9, 27.28638531055509431951361},
    {30.0, 27.38470143317193584992286},
    {30.1, 27.48302320895118323282},
    {50.0, 47.127575501871804584163},
    {100.0, 96.77973268994258371668848},
    {300.0, 296.2295875930022288383501},
    {700.0, 695.8056999984434490768029},
};

// I1(x) / I0(x)
const std::pair<double, double> kRatio[] = {
    {0.5, 0.2424996125808019453507024}, {1.0, 0.4463899658965345070476818},  {5.0, 0.893383137044085221587005},
    {10.0, 0.9485998259548459589713019}, {30.0, 0.9831895553653360926874557}, {100.0, 0.9949873730051687655873646},
    {700.0, 0.9992854588184260932734378},
};

double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

constexpr double kH = 1e-5;

}  // namespace

TEST_CASE("log I0 matches the extended-precision table") {
  for (const auto& [x, v] : kLogI0) {
    CAPTURE(x);
    CHECK(std::abs(log_bessel_i0(x) - v) <= 1e-10);
  }
  CHECK(std::abs(log_bessel_i0(100.0) - 96.77973268994258371668848) <= 1e-8);
  CHECK(std::isfinite(log_bessel_i0(700.0)));
  CHECK_THROWS_AS(log_bessel_i0(-1e-9), ValidationError);
}

TEST_CASE("log I0 is smooth across the series/asymptotic switch on a dense grid") {
  double prev = log_bessel_i0(0.0);
  for (double x = 0.01; x <= 700.0; x += 0.37) {
    const double v = log_bessel_i0(x);
    CHECK(v > prev);
    // log I0(x) lies between x - log(2 pi x)/2 and x for x > 0
    CHECK(v <= x);
    prev = v;
  }
}

TEST_CASE("I1/I0 ratio matches the table and the derivative of log I0") {
  for (const auto& [x, v] : kRatio) {
    CAPTURE(x);
    CHECK(std::abs(bessel_i1_i0_ratio(x) - v) <= 1e-10);
  }
  for (double x : {0.3, 7.99, 8.01, 29.99, 30.01, 200.0}) {
    const double fd = (log_bessel_i0(x + kH) - log_bessel_i0(x - kH)) / (2.0 * kH);
    CHECK(rel_err(bessel_i1_i0_ratio(x), fd) <= 1e-6);
  }
  CHECK(bessel_i1_i0_ratio(0.0) == 0.0);
}

TEST_CASE("center loss values and optimum") {
  CHECK(loss_center({1, 2, 3}, {1, 2, 3}, {0, 0, 0}).value == 0.0);
  CHECK(loss_center({1, 0, 0}, {0, 0, 0}, {0, 0, 0}).value == 0.5);
  // with residual r the minimizing log-variance is log r^2
  const double r = 0.7;
  const auto l = loss_center({r, 0, 0}, {0, 0, 0}, {std::log(r * r), 0, 0});
  CHECK(std::abs(l.d_log_var[0]) <= 1e-14);
}

TEST_CASE("size loss values and overflow") {
  CHECK(loss_size({0.3, 0.1, 0.2}, {0.3, 0.1, 0.2}, {0, 0, 0}).value == 0.0);
  CHECK(loss_size({std::log(2.0), 0, 0}, {std::log(1.0), 0, 0}, {0, 0, 0}).value ==
        doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(loss_size({800.0, 0, 0}, {0, 0, 0}, {0, 0, 0}), NumericError);
}

TEST_CASE("yaw loss identities") {
  const YawLossConfig no_penalty{0.0, 3.0};
  CHECK(std::abs(loss_yaw(0.4, 0.4, 0.0, no_penalty).value - 0.2359143585071786486894148) <= 1e-12);
  CHECK(std::abs(loss_yaw(0.4, 0.4, 60.0, no_penalty).value) <= 1e-12);
  CHECK(loss_yaw(0.4, 1.3, 0.5).value == doctest::Approx(loss_yaw(0.4, 1.3 + kTwoPi, 0.5).value).epsilon(1e-12));
  CHECK(loss_yaw(0.4 + kTwoPi, 1.3 + kTwoPi, 0.5).value == doctest::Approx(loss_yaw(0.4, 1.3, 0.5).value).epsilon(1e-12));
  CHECK(loss_yaw(0.0, 0.7, -1.0).value == doctest::Approx(loss_yaw(0.0, -0.7, -1.0).value).epsilon(1e-14));

  // penalty term equals lambda_v ELU(u - s0)
  const YawLossConfig cfg{0.1, 3.0};
  for (double u : {-2.0, 0.0, 2.9, 3.0, 5.0}) {
    const double penalty = loss_yaw(0.2, 0.2, u, cfg).value - loss_yaw(0.2, 0.2, u, no_penalty).value;
    const double x = u - 3.0;
    CHECK(penalty == doctest::Approx(0.1 * (x > 0.0 ? x : std::expm1(x))).epsilon(1e-12));
  }

  // kappa = 700 stays finite
  const auto big = loss_yaw(0.0, 0.5, -std::log(700.0));
  CHECK(std::isfinite(big.value));
  CHECK(std::isfinite(big.d_pred));
  CHECK(std::isfinite(big.d_log_var));
  CHECK_THROWS_AS(loss_yaw(0.0, 0.0, 0.0, YawLossConfig{-1.0, 3.0}), ConfigError);
}

TEST_CASE("analytic gradients match central differences at random points") {
  std::mt19937_64 rng(71);
  std::uniform_real_distribution<double> v(-3.0, 3.0);
  std::uniform_real_distribution<double> ang(-kPi, kPi);
  std::uniform_real_distribution<double> lv(-6.5, 5.0);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    std::array<double, 3> p{v(rng), v(rng), v(rng)}, t{v(rng), v(rng), v(rng)}, u{v(rng), v(rng), v(rng)};
    for (int which = 0; which < 2; ++which) {
      auto f = [&](const std::array<double, 3>& pp, const std::array<double, 3>& uu) {
        return which == 0 ? loss_center(pp, t, uu) : loss_size(pp, t, uu);
      };
      const auto g = f(p, u);
      for (std::size_t k = 0; k < 3; ++k) {
        auto pp = p, pm = p, up = u, um = u;
        pp[k] += kH;
        pm[k] -= kH;
        up[k] += kH;
        um[k] -= kH;
        worst = std::max(worst, rel_err(g.d_pred[k], (f(pp, u).value - f(pm, u).value) / (2 * kH)));
        worst = std::max(worst, rel_err(g.d_log_var[k], (f(p, up).value - f(p, um).value) / (2 * kH)));
      }
    }
    const double a = ang(rng), b = ang(rng), uy = lv(rng);
    const auto y = loss_yaw(a, b, uy);
    worst = std::max(worst, rel_err(y.d_pred, (loss_yaw(a + kH, b, uy).value - loss_yaw(a - kH, b, uy).value) / (2 * kH)));
    worst = std::max(worst,
                     rel_err(y.d_log_var, (loss_yaw(a, b, uy + kH).value - loss_yaw(a, b, uy - kH).value) / (2 * kH)));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("ELU") {
  CHECK(elu(2.0) == 2.0);
  CHECK(elu(0.0) == 0.0);
  CHECK(elu(-1.0) == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-15));
}
