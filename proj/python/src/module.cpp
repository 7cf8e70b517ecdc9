#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "uqcal/calib.hpp"
#include "uqcal/cli.hpp"
#include "uqcal/core.hpp"
#include "uqcal/errors.hpp"
#include "uqcal/losses.hpp"
#include "uqcal/math.hpp"
#include "uqcal/metrics.hpp"
#include "uqcal/optim.hpp"
#include "uqcal/report.hpp"

namespace py = pybind11;
using namespace uqcal;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vector(const Array& a) {
  const auto r = a.unchecked();
  if (a.ndim() != 1) throw ConfigError("expected a 1-d array");
  std::vector<double> out(static_cast<std::size_t>(a.shape(0)));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) out[static_cast<std::size_t>(i)] = r(i);
  return out;
}

std::vector<std::uint8_t> to_flags(const Array& a) {
  std::vector<std::uint8_t> out;
  for (double v : to_vector(a)) out.push_back(v != 0.0 ? 1 : 0);
  return out;
}

std::vector<double> optional_vector(const std::optional<Array>& a, std::size_t n, double fill) {
  if (!a) return std::vector<double>(n, fill);
  auto v = to_vector(*a);
  if (v.size() != n) throw ConfigError("array length " + std::to_string(v.size()) + " does not match " + std::to_string(n));
  return v;
}

std::vector<calib::ClassificationSample> cls_samples(const Array& logits, const Array& is_tp,
                                                     const std::optional<Array>& class_ids,
                                                     const std::optional<Array>& z_dens) {
  const auto l = to_vector(logits);
  const auto tp = to_flags(is_tp);
  if (tp.size() != l.size()) throw ConfigError("logits and is_tp differ in length");
  const auto c = optional_vector(class_ids, l.size(), 0.0);
  const auto z = optional_vector(z_dens, l.size(), 0.0);
  std::vector<calib::ClassificationSample> out(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) {
    out[i].class_id = static_cast<int>(c[i]);
    out[i].logit = l[i];
    out[i].score = sigmoid(l[i]);
    out[i].z_dens = z[i];
    out[i].is_tp = tp[i] != 0;
  }
  return out;
}

py::tuple triple(const losses::TripleLoss& t) { return py::make_tuple(t.value, t.d_pred, t.d_log_var); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Calibration metrics, calibrators and tooling for probabilistic 3D detections";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "d_ece", [](const Array& s, const Array& tp, std::size_t bins) { return metrics::d_ece(to_vector(s), to_flags(tp), bins); },
      py::arg("scores"), py::arg("is_tp"), py::arg("num_bins") = metrics::kClassificationBins);
  m.def(
      "la_ece",
      [](const Array& s, const Array& tp, const Array& d, double tau, std::size_t bins) {
        return metrics::la_ece(to_vector(s), to_flags(tp), to_vector(d), tau, bins);
      },
      py::arg("scores"), py::arg("is_tp"), py::arg("distances"), py::arg("tau") = kDefaultMatchThreshold,
      py::arg("num_bins") = metrics::kClassificationBins);
  m.def(
      "la_ace",
      [](const Array& s, const Array& tp, const Array& d, double tau) {
        return metrics::la_ace(to_vector(s), to_flags(tp), to_vector(d), tau);
      },
      py::arg("scores"), py::arg("is_tp"), py::arg("distances"), py::arg("tau") = kDefaultMatchThreshold);
  m.def(
      "mca",
      [](const Array& mu, const Array& sigma, const Array& y, std::size_t levels) {
        return metrics::mca(to_vector(mu), to_vector(sigma), to_vector(y), levels);
      },
      py::arg("mu"), py::arg("sigma"), py::arg("target"), py::arg("num_levels") = metrics::kCoverageLevels);
  m.def(
      "mca_angular",
      [](const Array& mu, const Array& kappa, const Array& y, std::size_t levels) {
        return metrics::mca_angular(to_vector(mu), to_vector(kappa), to_vector(y), levels);
      },
      py::arg("mu"), py::arg("kappa"), py::arg("target"), py::arg("num_levels") = metrics::kCoverageLevels);
  m.def(
      "ks_chi2_statistic", [](const Array& d2, double dof) { return metrics::ks_chi2_statistic(to_vector(d2), dof); },
      py::arg("squared_distances"), py::arg("dof"));

  m.def("gain", &calib::gain, py::arg("gamma"), py::arg("x"));
  m.def(
      "pava",
      [](const Array& v, const std::optional<Array>& w) {
        const auto values = to_vector(v);
        return calib::pava(values, optional_vector(w, values.size(), 1.0));
      },
      py::arg("values"), py::arg("weights") = py::none());

  m.def("log_bessel_i0", &losses::log_bessel_i0, py::arg("x"));
  m.def(
      "loss_center",
      [](std::array<double, 3> p, std::array<double, 3> t, std::array<double, 3> u) {
        return triple(losses::loss_center(p, t, u));
      },
      py::arg("pred"), py::arg("target"), py::arg("log_var"));
  m.def(
      "loss_size",
      [](std::array<double, 3> p, std::array<double, 3> t, std::array<double, 3> u) {
        return triple(losses::loss_size(p, t, u));
      },
      py::arg("pred_log"), py::arg("target_log"), py::arg("log_var"));
  m.def(
      "loss_yaw",
      [](double p, double t, double u, double lambda_v, double s0) {
        const auto r = losses::loss_yaw(p, t, u, {lambda_v, s0});
        return py::make_tuple(r.value, r.d_pred, r.d_log_var);
      },
      py::arg("pred"), py::arg("target"), py::arg("log_var"), py::arg("lambda_v") = 0.1, py::arg("s0") = 3.0);

  m.def(
      "differential_evolution",
      [](const std::function<double(std::vector<double>)>& fn, std::vector<std::pair<double, double>> bounds,
         std::size_t max_evaluations, std::uint64_t seed) {
        optim::DeConfig c;
        c.bounds = std::move(bounds);
        c.max_evaluations = max_evaluations;
        c.seed = seed;
        const auto r = optim::differential_evolution(
            [&](std::span<const double> x) { return fn(std::vector<double>(x.begin(), x.end())); }, c);
        py::dict out;
        out["x"] = r.best_params;
        out["fun"] = r.best_value;
        out["evaluations"] = r.evaluations;
        out["generations"] = r.generations;
        return out;
      },
      py::arg("objective"), py::arg("bounds"), py::arg("max_evaluations") = optim::kDefaultEvaluationBudget,
      py::arg("seed") = 0);

  py::class_<calib::ClassificationCalibrator>(m, "ClassificationCalibrator")
      .def_property_readonly("method", [](const calib::ClassificationCalibrator& c) { return calib::to_string(c.method); })
      .def_property_readonly("scope", [](const calib::ClassificationCalibrator& c) { return calib::to_string(c.scope); })
      .def_readonly("gamma", &calib::ClassificationCalibrator::gamma)
      .def(
          "probability",
          [](const calib::ClassificationCalibrator& c, const Array& logits, const std::optional<Array>& class_ids,
             const std::optional<Array>& z_dens) {
            const auto l = to_vector(logits);
            const auto ids = optional_vector(class_ids, l.size(), 0.0);
            const auto z = optional_vector(z_dens, l.size(), 0.0);
            std::vector<double> out(l.size());
            for (std::size_t i = 0; i < l.size(); ++i) out[i] = c.probability(static_cast<int>(ids[i]), l[i], sigmoid(l[i]), z[i]);
            return out;
          },
          py::arg("logits"), py::arg("class_ids") = py::none(), py::arg("z_dens") = py::none())
      .def("to_json", [](const calib::ClassificationCalibrator& c) { return calib::to_json(c); });
  m.def("classification_from_json", &calib::classification_from_json, py::arg("text"));

  m.def(
      "fit_classification",
      [](const Array& logits, const Array& is_tp, const std::string& method, const std::optional<Array>& class_ids,
         const std::optional<Array>& z_dens, const std::string& scope, double gamma, std::size_t num_classes,
         std::size_t max_evaluations, std::uint64_t seed) {
        const auto samples = cls_samples(logits, is_tp, class_ids, z_dens);
        calib::FitConfig c;
        c.scope = calib::parse_scope(scope);
        c.gamma = gamma;
        c.num_classes = num_classes;
        c.max_evaluations = max_evaluations;
        c.seed = seed;
        if (c.scope == calib::Scope::class_wise && c.num_classes == 0) {
          for (const auto& s : samples) c.num_classes = std::max(c.num_classes, static_cast<std::size_t>(s.class_id + 1));
        }
        return calib::fit_classification(samples, calib::parse_cls_method(method), c);
      },
      py::arg("logits"), py::arg("is_tp"), py::arg("method") = "ts", py::arg("class_ids") = py::none(),
      py::arg("z_dens") = py::none(), py::arg("scope") = "global",
      py::arg("gamma") = calib::kDefaultClassificationGamma, py::arg("num_classes") = 0,
      py::arg("max_evaluations") = optim::kDefaultEvaluationBudget, py::arg("seed") = 0);

  m.def(
      "evaluate",
      [](const std::string& prefix, const std::optional<std::string>& thresholds, bool pool_xyz, std::size_t workers) {
        report::ReportConfig c;
        if (thresholds) c.thresholds = report::parse_thresholds(*thresholds);
        c.pool_xyz = pool_xyz;
        c.workers = workers;
        return report::report_json(report::classwise_threshold_report(load_dataset(prefix, workers), c), false);
      },
      py::arg("prefix"), py::arg("thresholds") = py::none(), py::arg("pool_xyz") = false, py::arg("workers") = 1);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
