#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "support.hpp"
#include "uqcal/calib.hpp"
#include "uqcal/diagnostics.hpp"
#include "uqcal/errors.hpp"
#include "uqcal/math.hpp"
#include "uqcal/metrics.hpp"

using namespace uqcal;
using namespace uqcal::calib;

namespace {

// Labels drawn as Bernoulli(sigmoid(logit / t_true)).
std::vector<ClassificationSample> planted_logits(std::size_t n, double t_true, std::uint64_t seed, int class_id = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.5, 2.5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ClassificationSample> out(n);
  for (auto& s : out) {
    s.class_id = class_id;
    s.logit = g(rng);
    s.score = sigmoid(s.logit);
    s.is_tp = u(rng) < sigmoid(s.logit / t_true);
  }
  return out;
}

// Residuals with true variance `truth(depth)` and a predicted variance `predicted(truth)`.
template <class Truth, class Predicted>
std::vector<RegressionSample> planted_regression(std::size_t n, std::uint64_t seed, Truth truth, Predicted predicted,
                                                double spread = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> depth(1.0, 50.0);
  std::lognormal_distribution<double> h(0.0, spread);
  std::vector<RegressionSample> out(n);
  for (auto& s : out) {
    s.depth = depth(rng);
    const double scale = h(rng);
    for (std::size_t k = 0; k < kNumRegressionTargets; ++k) {
      const double var = truth(s.depth) * scale;
      s.predicted[k] = g(rng);
      const double r = std::sqrt(var) * g(rng);
      s.target[k] = k == kNumRegressionTargets - 1 ? wrap_angle(s.predicted[k] + r) : s.predicted[k] + r;
      s.value[k] = k == kNumRegressionTargets - 1 ? 1.0 / predicted(var) : predicted(var);
    }
  }
  return out;
}

FitConfig fast_config(std::size_t budget = 2000) {
  FitConfig c;
  c.max_evaluations = budget;
  c.seed = 3;
  return c;
}

double fitted_nll(const ClassificationCalibrator& cal, const std::vector<ClassificationSample>& s) {
  std::vector<double> p;
  for (const auto& x : s) p.push_back(cal.probability(x.class_id, x.logit, x.score, x.z_dens));
  return binary_nll(p, s);
}

// Exact isotonic least squares by enumerating contiguous partitions.
std::vector<double> isotonic_by_partitions(const std::vector<double>& v, const std::vector<double>& w) {
  const std::size_t n = v.size();
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_fit;
  for (std::uint32_t cuts = 0; cuts < (1u << (n - 1)); ++cuts) {
    std::vector<double> fit(n);
    std::size_t start = 0;
    double prev = -std::numeric_limits<double>::infinity();
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      if (i == n - 1 || (cuts >> i) & 1u) {
        double sw = 0.0, sv = 0.0;
        for (std::size_t j = start; j <= i; ++j) {
          sw += w[j];
          sv += w[j] * v[j];
        }
        const double m = sv / sw;
        if (m < prev) ok = false;
        for (std::size_t j = start; j <= i; ++j) fit[j] = m;
        prev = m;
        start = i + 1;
      }
    }
    if (!ok) continue;
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) sse += w[i] * (v[i] - fit[i]) * (v[i] - fit[i]);
    if (sse < best) {
      best = sse;
      best_fit = fit;
    }
  }
  return best_fit;
}

}  // namespace

TEST_CASE("gain") {
  CHECK(gain(0.3, 0.0) == 1.0);
  CHECK(gain(0.3, 1e3) == doctest::Approx(1.3).epsilon(1e-15));
  CHECK(gain(0.3, -1e3) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(std::abs(gain(0.2, 1.0) - 1.1523188311911529776) <= 1e-15);
}

TEST_CASE("temperature scaling") {
  for (double l : {-3.0, 0.0, 2.5}) CHECK(apply_ts({1.0}, l) == sigmoid(l));
  CHECK(std::abs(apply_ts({2.0}, 2.0) - 0.73105857863000487925) <= 1e-15);
  CHECK(apply_ts({1e12}, 7.0) == doctest::Approx(0.5).epsilon(1e-10));
}

TEST_CASE("density-aware temperature scaling") {
  for (double l : {-3.0, 0.0, 2.5}) {
    CHECK(apply_da_ts({1.7, 0.8}, 0.2, l, 0.0) == apply_ts({1.7}, l));
    CHECK(apply_da_ts({1.7, 0.0}, 0.2, l, -2.5) == apply_ts({1.7}, l));
  }
  CHECK(std::abs(1.0 * gain(0.2, -2.0) - 0.80719448398483662321) <= 1e-15);
  CHECK(std::abs(apply_da_ts({1.0, 1.0}, 0.2, 2.0, -2.0) - 0.92256490469438238507) <= 1e-14);
}

TEST_CASE("Platt scaling and its density-aware form") {
  for (double l : {-3.0, 0.0, 2.5}) {
    CHECK(apply_ps({1.0, 0.0}, l) == sigmoid(l));
    CHECK(apply_da_ps({1.0, -0.4, 2.0, -1.0}, 0.2, l, 0.0) == doctest::Approx(sigmoid(l - 0.4)).epsilon(1e-15));
  }
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int t = 0; t < 200; ++t) {
    const DaPlattParams p{std::abs(u(rng)) + 0.1, u(rng), u(rng), u(rng)};
    const double g = 0.3, l = u(rng), z = u(rng);
    const double direct = 1.0 / (1.0 + std::exp(-(p.slope * l * (1.0 + g * std::tanh(p.s_scale * z)) +
                                                 p.shift * (1.0 + g * std::tanh(p.s_shift * z)))));
    CHECK(std::abs(apply_da_ps(p, g, l, z) - direct) <= 1e-12);
  }
}

TEST_CASE("pool adjacent violators") {
  const std::vector<double> ones(3, 1.0);
  const std::vector<double> v{1.0, 3.0, 2.0};
  const auto fit = pava(v, ones);
  CHECK(fit == std::vector<double>{1.0, 2.5, 2.5});
  // grid search over monotone sequences on [0, 4] with step 0.01
  double best = std::numeric_limits<double>::infinity();
  std::array<double, 3> arg{};
  for (int a = 0; a <= 400; ++a) {
    for (int b = a; b <= 400; ++b) {
      for (int c = b; c <= 400; c += 1) {
        const double x = a / 100.0, y = b / 100.0, z = c / 100.0;
        const double sse = (x - 1) * (x - 1) + (y - 3) * (y - 3) + (z - 2) * (z - 2);
        if (sse < best) {
          best = sse;
          arg = {x, y, z};
        }
      }
    }
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(fit[i] - arg[i]) <= 0.01);

  CHECK(pava(std::vector<double>{0.1, 0.2, 0.2, 0.9}, std::vector<double>(4, 1.0)) ==
        std::vector<double>{0.1, 0.2, 0.2, 0.9});
  const std::vector<double> dec{4.0, 3.0, 1.0};
  const std::vector<double> w{1.0, 2.0, 1.0};
  for (double x : pava(dec, w)) CHECK(x == doctest::Approx(11.0 / 4.0).epsilon(1e-15));
  CHECK_THROWS_AS(pava(dec, std::vector<double>{1.0, 0.0, 1.0}), ValidationError);
  CHECK_THROWS_AS(pava(dec, std::vector<double>{1.0, 1.0}), ValidationError);
}

TEST_CASE("PAVA equals the exact partition optimum on random inputs") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> len(1, 9);
  for (int t = 0; t < 300; ++t) {
    const auto n = static_cast<std::size_t>(len(rng));
    const auto v = test::uniform_vector(rng, n, -1.0, 1.0);
    const auto w = test::uniform_vector(rng, n, 0.1, 3.0);
    const auto fit = pava(v, w);
    const auto oracle = isotonic_by_partitions(v, w);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(fit[i] - oracle[i]) <= 1e-12);
  }
}

TEST_CASE("isotonic regression") {
  // precision equals the score at every level
  std::vector<double> scores, labels;
  for (int level = 1; level <= 19; ++level) {
    const double p = level / 20.0;
    for (int i = 0; i < 1000; ++i) {
      scores.push_back(p);
      labels.push_back(i < static_cast<int>(std::lround(p * 1000)) ? 1.0 : 0.0);
    }
  }
  IsotonicParams ir;
  ir.step = fit_isotonic(scores, labels);
  for (int level = 1; level <= 19; ++level) CHECK(apply_ir(ir, level / 20.0) == doctest::Approx(level / 20.0).epsilon(1e-12));
  CHECK(apply_ir(ir, 0.0) == ir.step.values.front());
  CHECK(apply_ir(ir, 1.0) == ir.step.values.back());
  CHECK(apply_ir(ir, 0.12) == apply_ir(ir, 0.10));  // right-continuous step
  for (double s : {0.0, 0.33, 0.97}) CHECK(apply_da_ir(ir, s, 1.7) == apply_ir(ir, s));
  for (std::size_t i = 1; i < ir.step.values.size(); ++i) CHECK(ir.step.values[i] >= ir.step.values[i - 1]);
  CHECK_THROWS_AS(apply_ir(IsotonicParams{}, 0.5), ConfigError);
}

TEST_CASE("regression calibrators") {
  CHECK(apply_reg_ts({1.0}, 0.37) == 0.37);
  CHECK(apply_reg_ts({2.0}, 4.0) == 2.0);
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const auto v = test::uniform_vector(rng, kNumRegressionTargets, 0.01, 5.0);
    const double temp = test::uniform_vector(rng, 1, 0.1, 10.0)[0];
    for (double x : v) CHECK(apply_reg_ts({temp}, x) == x / temp);
  }
  CHECK(apply_reg_depth({0.0, 0.7}, 3.0) == 0.7);
  CHECK(apply_reg_depth({0.0, 0.7}, 90.0) == 0.7);
  CHECK(apply_reg_depth({0.1, 0.5}, 10.0) == doctest::Approx(1.5).epsilon(1e-15));
  const auto before = variance_floor_count();
  CHECK(apply_reg_depth({-1.0, 0.5}, 10.0) == kVarianceFloor);
  CHECK(variance_floor_count() == before + 1);

  CHECK(apply_reg_da_ts({1.0, 0.0, 0.0}, 0.15, 2.0, -3.0) == 2.0);
  CHECK(apply_reg_da_ts({1.5, 0.2, 2.0}, 0.15, 2.0, 0.0) == doctest::Approx(3.2).epsilon(1e-15));
  CHECK(std::abs(apply_reg_da_ts({1.0, 0.0, 1.0}, 0.15, 2.0, -3.0) - 1.7014835738939808646) <= 1e-14);
}

TEST_CASE("density-aware forms with gamma = 0 equal the plain forms") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  for (int t = 0; t < 200; ++t) {
    const double l = u(rng), z = u(rng), temp = std::abs(u(rng)) + 0.05;
    CHECK(apply_da_ts({temp, u(rng)}, 0.0, l, z) == apply_ts({temp}, l));
    const double slope = std::abs(u(rng)), shift = u(rng);
    CHECK(apply_da_ps({slope, shift, u(rng), u(rng)}, 0.0, l, z) == apply_ps({slope, shift}, l));
    const double var = std::abs(u(rng)) + 0.01, s = std::abs(u(rng)) + 0.05, b = std::abs(u(rng));
    CHECK(apply_reg_da_ts({s, b, u(rng)}, 0.0, var, z) == s * var + b);
  }
}

TEST_CASE("temperature scaling preserves the score order for a fixed z_dens") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  std::vector<double> logits(300);
  for (auto& l : logits) l = u(rng);
  std::sort(logits.begin(), logits.end());
  for (double z : {-2.0, 0.0, 1.5}) {
    for (std::size_t i = 1; i < logits.size(); ++i) {
      if (logits[i] == logits[i - 1]) continue;
      CHECK(apply_ts({2.3}, logits[i]) > apply_ts({2.3}, logits[i - 1]));
      CHECK(apply_da_ts({0.7, -1.2}, 0.2, logits[i], z) > apply_da_ts({0.7, -1.2}, 0.2, logits[i - 1], z));
    }
  }
}

TEST_CASE("fitted temperatures recover planted values") {
  const auto hot = planted_logits(20000, 2.0, 6);
  const auto ts = fit_classification(hot, ClsMethod::ts, fast_config());
  const double t2 = std::get<TemperatureParams>(ts.params.at(kGlobalKey)).temperature;
  CHECK(t2 >= 1.9);
  CHECK(t2 <= 2.1);

  const auto cold = planted_logits(20000, 1.0, 7);
  const auto ts1 = fit_classification(cold, ClsMethod::ts, fast_config());
  const double t1 = std::get<TemperatureParams>(ts1.params.at(kGlobalKey)).temperature;
  CHECK(t1 >= 0.95);
  CHECK(t1 <= 1.05);

  // without a density signal DA-TS collapses to TS
  const auto da = fit_classification(hot, ClsMethod::da_ts, fast_config(3000));
  CHECK(std::abs(std::get<DaTemperatureParams>(da.params.at(kGlobalKey)).temperature - t2) <= 0.05);
}

TEST_CASE("fitted calibrators never do worse than the identity") {
  auto s = planted_logits(3000, 1.6, 8);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& x : s) x.z_dens = g(rng);
  ClassificationCalibrator identity;
  const double base = fitted_nll(identity, s);
  for (ClsMethod m : {ClsMethod::ts, ClsMethod::ps, ClsMethod::ir, ClsMethod::da_ts, ClsMethod::da_ps, ClsMethod::da_ir}) {
    CAPTURE(to_string(m));
    const auto cal = fit_classification(s, m, fast_config(1500));
    CHECK(fitted_nll(cal, s) <= base + 1e-12);
    for (const auto& x : s) {
      const double p = cal.probability(x.class_id, x.logit, x.score, x.z_dens);
      CHECK(p > 0.0);
      CHECK(p < 1.0);
    }
  }
}

TEST_CASE("class-wise fit of a single class equals the global fit") {
  const auto s = planted_logits(2000, 1.4, 10);
  for (ClsMethod m : {ClsMethod::ts, ClsMethod::da_ps, ClsMethod::da_ir}) {
    auto cfg = fast_config(1000);
    const auto global = fit_classification(s, m, cfg);
    cfg.scope = Scope::class_wise;
    cfg.num_classes = 1;
    const auto classwise = fit_classification(s, m, cfg);
    CHECK(to_json(ClassificationCalibrator{m, Scope::global, cfg.gamma, {{kGlobalKey, classwise.params.at(0)}}}) ==
          to_json(global));
  }
}

TEST_CASE("classes without detections get the identity with a warning") {
  const auto s = planted_logits(500, 1.4, 11, 1);
  auto cfg = fast_config(600);
  cfg.scope = Scope::class_wise;
  cfg.num_classes = 3;
  WarningCapture capture;
  const auto cal = fit_classification(s, ClsMethod::ts, cfg);
  CHECK(capture.contains("identity calibrator for class 0"));
  CHECK(capture.contains("identity calibrator for class 2"));
  CHECK(std::holds_alternative<Identity>(cal.params.at(0)));
  CHECK(std::holds_alternative<TemperatureParams>(cal.params.at(1)));
  CHECK(cal.probability(2, 1.3, sigmoid(1.3), 0.0) == sigmoid(1.3));

  const auto empty = fit_classification({}, ClsMethod::ts, fast_config());
  CHECK(std::holds_alternative<Identity>(empty.params.at(kGlobalKey)));
}

TEST_CASE("regression temperature recovers a planted inflation") {
  const auto s = planted_regression(4000, 12, [](double) { return 0.3; }, [](double v) { return 4.0 * v; });
  const auto cal = fit_regression(s, RegMethod::ts, fast_config(1000));
  const auto& p = cal.params.at(kGlobalKey);
  for (std::size_t k = 0; k + 1 < kNumRegressionTargets; ++k) {
    CAPTURE(k);
    const double t = std::get<RegTsParams>(p[k]).temperature;
    CHECK(t >= 3.6);
    CHECK(t <= 4.4);
    std::vector<double> mu, sigma, target;
    for (const auto& x : s) {
      mu.push_back(x.predicted[k]);
      sigma.push_back(std::sqrt(cal.value(0, k, x.value[k], x.depth, 0.0)));
      target.push_back(x.target[k]);
    }
    CHECK(metrics::mca(mu, sigma, target) <= 0.02);
  }
  // the concentration is divided by the same kind of factor, so it lands near 1/4
  const double t_yaw = std::get<RegTsParams>(p[6]).temperature;
  CHECK(t_yaw >= 0.9 / 4.0);
  CHECK(t_yaw <= 1.1 / 4.0);

  const auto exact = planted_regression(4000, 13, [](double) { return 0.3; }, [](double v) { return v; });
  const auto id = fit_regression(exact, RegMethod::ts, fast_config(1000));
  for (std::size_t k = 0; k < kNumRegressionTargets; ++k) {
    const double t = std::get<RegTsParams>(id.params.at(kGlobalKey)[k]).temperature;
    CHECK(t >= 0.9);
    CHECK(t <= 1.1);
  }
}

TEST_CASE("depth calibrator fits a planted affine variance") {
  const auto s = planted_regression(6000, 14, [](double d) { return 0.05 * d + 0.2; }, [](double) { return 1.0; }, 0.0);
  const auto cal = fit_regression(s, RegMethod::depth, fast_config(3000));
  auto area = [&](std::size_t k, const DepthParams& p) {
    std::vector<double> mu, sigma, target;
    for (const auto& x : s) {
      mu.push_back(x.predicted[k]);
      sigma.push_back(std::sqrt(apply_reg_depth(p, x.depth)));
      target.push_back(x.target[k]);
    }
    return metrics::mca(mu, sigma, target);
  };
  const DepthParams planted{0.05, 0.2};
  for (std::size_t k = 0; k + 1 < kNumRegressionTargets; ++k) {
    CAPTURE(k);
    const auto p = std::get<DepthParams>(cal.params.at(kGlobalKey)[k]);
    CHECK(area(k, p) <= area(k, planted) + 1e-12);
    CHECK(p.a > 0.0);
    const double mid = 25.5;
    CHECK(std::abs(apply_reg_depth(p, mid) - apply_reg_depth(planted, mid)) <= 0.15 * apply_reg_depth(planted, mid));
  }
}

TEST_CASE("sparse regression cells keep the identity") {
  const auto s = planted_regression(30, 15, [](double) { return 0.3; }, [](double v) { return v; });
  WarningCapture capture;
  const auto cal = fit_regression(s, RegMethod::da_ts, fast_config(500));
  CHECK(capture.contains("identity regression calibrator for class -1: 30 TPs"));
  CHECK(cal.value(0, 2, 0.8, 10.0, 1.0) == 0.8);
}

TEST_CASE("calibrator persistence round trip") {
  auto s = planted_logits(800, 1.5, 16);
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& x : s) x.z_dens = g(rng);
  const auto reg_samples = planted_regression(400, 18, [](double) { return 0.3; }, [](double v) { return 2.0 * v; });
  auto cfg = fast_config(400);
  cfg.scope = Scope::class_wise;
  cfg.num_classes = 2;
  test::TempDir dir;
  WarningCapture capture;
  for (ClsMethod m : {ClsMethod::ts, ClsMethod::ps, ClsMethod::ir, ClsMethod::da_ts, ClsMethod::da_ps, ClsMethod::da_ir}) {
    CAPTURE(to_string(m));
    CHECK(parse_cls_method(to_string(m)) == m);
    CalibratorBundle bundle;
    bundle.classification = fit_classification(s, m, cfg);
    bundle.regression = fit_regression(reg_samples, RegMethod::da_ts, fast_config(300));
    save_calibrators(bundle, dir / "cal.json");
    const auto back = load_calibrators(dir / "cal.json");
    REQUIRE(back.classification.has_value());
    REQUIRE(back.regression.has_value());
    CHECK(to_json(*back.classification) == to_json(*bundle.classification));
    CHECK(to_json(*back.regression) == to_json(*bundle.regression));
    for (const auto& x : s) {
      CHECK(back.classification->probability(x.class_id, x.logit, x.score, x.z_dens) ==
            bundle.classification->probability(x.class_id, x.logit, x.score, x.z_dens));
    }
  }
  for (RegMethod m : {RegMethod::identity, RegMethod::ts, RegMethod::da_ts, RegMethod::depth}) {
    CHECK(parse_reg_method(to_string(m)) == m);
  }
  CHECK(parse_scope("class") == Scope::class_wise);
  CHECK_THROWS_AS(parse_cls_method("bogus"), ConfigError);
  CHECK_THROWS_AS(classification_from_json("{"), ParseError);
}
