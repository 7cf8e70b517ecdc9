#include "uqcal/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "uqcal/calib.hpp"
#include "uqcal/core.hpp"
#include "uqcal/density.hpp"
#include "uqcal/diagnostics.hpp"
#include "uqcal/errors.hpp"
#include "uqcal/matching.hpp"
#include "uqcal/report.hpp"
#include "uqcal/synth.hpp"

namespace uqcal::cli {
namespace {

using nlohmann::json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  bool no_timestamp = false;
};

std::uint64_t resolve_seed(const Common& c) {
  if (c.seed) return *c.seed;
  const char* env = std::getenv("UQCAL_SEED");
  if (env == nullptr || *env == '\0') return 0;
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(env, &pos);
    if (pos != std::string(env).size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::logic_error&) {
    throw UsageError(std::string("UQCAL_SEED is not an unsigned integer: '") + env + "'");
  }
}

Dataset select_part(const Dataset& ds, const std::string& part, double fraction) {
  if (part == "all") return ds;
  auto [calib, test] = sequential_split(ds, fraction);
  if (part == "calib") return calib;
  if (part == "test") return test;
  throw UsageError("--part must be calib, test or all");
}

std::vector<double> z_for(const std::optional<density::DensityModel>& model, const Dataset& ds, std::size_t workers) {
  if (!model) return {};
  return density::compute_z_dens(*model, ds, workers);
}

bool density_aware(calib::ClsMethod m) {
  return m == calib::ClsMethod::da_ts || m == calib::ClsMethod::da_ps || m == calib::ClsMethod::da_ir;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot write " + path.string());
  f << text;
  if (text.empty() || text.back() != '\n') f << '\n';
}

struct SynthArgs {
  std::string out;
  std::size_t severity = 0;
  std::size_t calib_severity = 0;
  synth::SynthConfig config;
  std::optional<double> temperature;
  std::optional<double> inflation;
};

json run_synth(SynthArgs& a, const Common& common) {
  a.config.seed = resolve_seed(common);
  a.config.workers = common.workers;
  if (a.temperature) a.config.temperature.assign(a.config.num_classes, *a.temperature);
  if (a.inflation) a.config.inflation.fill(*a.inflation);
  if (a.severity >= synth::kNumSeverities || a.calib_severity >= synth::kNumSeverities) {
    throw UsageError("severity must be in 0..3");
  }
  const auto out = synth::write_synthetic(a.config, a.calib_severity, a.severity, a.out);
  return {{"command", "synth"},
          {"seed", a.config.seed},
          {"severity", a.severity},
          {"train", out.train_prefix.string()},
          {"val", out.val_prefix.string()},
          {"truth", out.truth_path.string()},
          {"train_detections", out.train_detections},
          {"val_detections", out.val_detections}};
}

struct DensityArgs {
  std::string train;
  std::string calib;
  std::string out;
  std::string estimator = "flow";
  double calib_fraction = 0.4;
  density::DensityConfig config;
};

json run_density_fit(DensityArgs& a, const Common& common) {
  a.config.seed = resolve_seed(common);
  a.config.workers = common.workers;
  if (a.estimator == "flow") {
    a.config.kind = density::EstimatorKind::flow;
  } else if (a.estimator == "gmm") {
    a.config.kind = density::EstimatorKind::gmm;
  } else {
    throw UsageError("--estimator must be flow or gmm");
  }
  const Dataset train = load_dataset(a.train, common.workers);
  density::DensityModel model = density::fit_density(train, a.config);
  std::size_t calib_detections = 0;
  if (!a.calib.empty()) {
    const Dataset val = load_dataset(a.calib, common.workers);
    const Dataset calib = sequential_split(val, a.calib_fraction).first;
    density::set_calibration_stats(model, calib, common.workers);
    calib_detections = calib.detections.size();
  } else {
    warn("no --calib split given; z_dens statistics default to mean 0, stddev 1");
  }
  density::save_density(model, a.out);
  return {{"command", "density-fit"},
          {"estimator", a.estimator},
          {"classes_fitted", model.estimators.size()},
          {"feature_dim", model.feature_dim},
          {"calib_detections", calib_detections},
          {"out", a.out}};
}

struct CalibArgs {
  std::string data;
  std::string density;
  std::string out;
  std::string method = "ts";
  std::string reg_method = "none";
  std::string scope = "global";
  double gamma = calib::kDefaultClassificationGamma;
  double reg_gamma = calib::kDefaultRegressionGamma;
  std::size_t budget = 20000;
  double calib_fraction = 0.4;
  double tau = kDefaultMatchThreshold;
};

json run_calib_fit(CalibArgs& a, const Common& common) {
  const auto scope = calib::parse_scope(a.scope);
  const std::optional<calib::ClsMethod> cls =
      a.method == "none" ? std::nullopt : std::optional(calib::parse_cls_method(a.method));
  const std::optional<calib::RegMethod> reg =
      a.reg_method == "none" ? std::nullopt : std::optional(calib::parse_reg_method(a.reg_method));
  const bool needs_density = (cls && density_aware(*cls)) || (reg && *reg == calib::RegMethod::da_ts);
  if (needs_density && a.density.empty()) throw UsageError("density-aware methods need --density");

  const Dataset val = load_dataset(a.data, common.workers);
  const Dataset calib_split = sequential_split(val, a.calib_fraction).first;
  std::optional<density::DensityModel> model;
  if (!a.density.empty()) model = density::load_density(a.density);
  const auto z = z_for(model, calib_split, common.workers);
  const auto matches = match_dataset(calib_split, a.tau, {}, common.workers);

  calib::FitConfig fit;
  fit.scope = scope;
  fit.num_classes = calib_split.num_classes();
  fit.max_evaluations = a.budget;
  fit.seed = resolve_seed(common);
  fit.workers = common.workers;

  calib::CalibratorBundle bundle;
  json summary = {{"command", "calib-fit"}, {"scope", calib::to_string(scope)}};
  if (cls) {
    fit.gamma = a.gamma;
    const auto samples = calib::classification_samples(calib_split, matches, z);
    bundle.classification = calib::fit_classification(samples, *cls, fit);
    summary["method"] = calib::to_string(*cls);
    summary["calib_detections"] = samples.size();
  }
  if (reg) {
    fit.gamma = a.reg_gamma;
    const auto samples = calib::regression_samples(calib_split, matches, z);
    bundle.regression = calib::fit_regression(samples, *reg, fit);
    summary["reg_method"] = calib::to_string(*reg);
    summary["calib_true_positives"] = samples.size();
  }
  if (!cls && !reg) throw UsageError("nothing to fit: both --method and --reg-method are none");
  calib::save_calibrators(bundle, a.out);
  summary["out"] = a.out;
  return summary;
}

struct ApplyArgs {
  std::string data;
  std::string density;
  std::string calibrators;
  std::string out;
  std::string part = "all";
  double calib_fraction = 0.4;
};

json run_apply(ApplyArgs& a, const Common& common) {
  const Dataset ds = select_part(load_dataset(a.data, common.workers), a.part, a.calib_fraction);
  const auto bundle = calib::load_calibrators(a.calibrators);
  std::optional<density::DensityModel> model;
  if (!a.density.empty()) model = density::load_density(a.density);
  const bool needs_density =
      (bundle.classification && density_aware(bundle.classification->method)) ||
      (bundle.regression && bundle.regression->method == calib::RegMethod::da_ts);
  if (needs_density && !model) throw UsageError("density-aware calibrators need --density");
  const auto z = z_for(model, ds, common.workers);
  const Dataset out = calib::apply_calibration(ds, z, bundle.classification ? &*bundle.classification : nullptr,
                                               bundle.regression ? &*bundle.regression : nullptr);
  save_dataset(out, a.out);
  return {{"command", "apply"}, {"detections", out.detections.size()}, {"part", a.part}, {"out", a.out}};
}

struct EvalArgs {
  std::string data;
  std::string out;
  std::string out_dir;
  std::string part = "all";
  std::string thresholds = "0.05:0.60:0.05";
  double calib_fraction = 0.4;
  report::ReportConfig config;
};

json run_evaluate(EvalArgs& a, const Common& common, bool full_report) {
  a.config.thresholds = report::parse_thresholds(a.thresholds);
  a.config.workers = common.workers;
  const Dataset ds = select_part(load_dataset(a.data, common.workers), a.part, a.calib_fraction);
  const auto rep = report::classwise_threshold_report(ds, a.config);
  const std::string text = report::report_json(rep, !common.no_timestamp);
  json summary = {{"command", full_report ? "report" : "evaluate"},
                  {"part", a.part},
                  {"detections", ds.detections.size()},
                  {"thresholds", rep.per_threshold.size()}};
  for (const auto& [k, v] : rep.aggregates) summary[k] = v;
  if (!a.out.empty()) {
    write_text(a.out, text);
    summary["out"] = a.out;
  }
  if (full_report) {
    const std::filesystem::path dir = a.out_dir;
    std::filesystem::create_directories(dir);
    if (a.out.empty()) write_text(dir / "report.json", text);
    const double min_score = a.config.thresholds.front();
    write_text(dir / "reliability.csv", report::reliability_csv(ds, min_score, a.config));
    write_text(dir / "coverage_xyz.csv", report::coverage_csv(ds, min_score, report::CoverageGroup::xyz, a.config));
    write_text(dir / "coverage_lwh.csv", report::coverage_csv(ds, min_score, report::CoverageGroup::lwh, a.config));
    write_text(dir / "coverage_yaw.csv", report::coverage_csv(ds, min_score, report::CoverageGroup::yaw, a.config));
    summary["out_dir"] = a.out_dir;
  }
  return summary;
}

void add_common(CLI::App& app, Common& c) {
  app.add_option("--seed", c.seed, "Random seed (falls back to UQCAL_SEED, then 0)");
  app.add_option("--workers", c.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--no-timestamp", c.no_timestamp, "Omit the generation time from reports");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Calibration and uncertainty toolkit for probabilistic 3D detections", "uqcal"};
  app.require_subcommand(1);
  Common common;

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset with planted miscalibration");
  add_common(*synth_cmd, common);
  synth_cmd->add_option("--out", sa.out, "Output directory")->required();
  synth_cmd->add_option("--severity", sa.severity, "Shift severity of the test-role frames (0-3)");
  synth_cmd->add_option("--calib-severity", sa.calib_severity, "Shift severity of the calibration-role frames");
  synth_cmd->add_option("--classes", sa.config.num_classes, "Number of classes");
  synth_cmd->add_option("--feature-dim", sa.config.feature_dim, "Query feature dimension");
  synth_cmd->add_option("--train-frames", sa.config.train_frames, "Frames in the train split");
  synth_cmd->add_option("--calib-frames", sa.config.calib_frames, "Calibration-role frames in the val split");
  synth_cmd->add_option("--test-frames", sa.config.test_frames, "Test-role frames in the val split");
  synth_cmd->add_option("--objects", sa.config.objects_per_frame, "Mean objects per frame");
  synth_cmd->add_option("--temperature", sa.temperature, "Planted temperature for every class");
  synth_cmd->add_option("--inflation", sa.inflation, "Planted variance inflation for every target");
  synth_cmd->add_option("--clutter", sa.config.clutter_fraction, "Share of FPs with background features");
  synth_cmd->add_option("--atypicality-temperature-gain", sa.config.atypicality_temperature_gain,
                         "Extra temperature per unit of feature atypicality");
  synth_cmd->add_option("--atypicality-logit-offset", sa.config.atypicality_logit_offset,
                         "Logit decrease per unit of feature atypicality");
  synth_cmd->add_option("--atypicality-residual-gain", sa.config.atypicality_residual_gain,
                         "Residual scale increase per unit of feature atypicality");

  DensityArgs da;
  auto* density_cmd = app.add_subcommand("density-fit", "Fit class-conditional query-feature densities");
  add_common(*density_cmd, common);
  density_cmd->add_option("--train", da.train, "Training dataset prefix")->required();
  density_cmd->add_option("--calib", da.calib, "Dataset prefix whose calibration part sets z_dens statistics");
  density_cmd->add_option("--out", da.out, "Density model file")->required();
  density_cmd->add_option("--estimator", da.estimator, "flow or gmm");
  density_cmd->add_option("--components", da.config.gmm.components, "GMM components per class");
  density_cmd->add_flag("--full-covariance{false}", da.config.gmm.diagonal, "GMM with full covariances");
  density_cmd->add_option("--blocks", da.config.flow.num_blocks, "Flow coupling blocks");
  density_cmd->add_option("--hidden", da.config.flow.hidden, "Flow hidden units");
  density_cmd->add_option("--epochs", da.config.flow.adam.epochs, "Flow training epochs");
  density_cmd->add_option("--lr", da.config.flow.adam.learning_rate, "Flow learning rate");
  density_cmd->add_option("--batch", da.config.flow.adam.batch_size, "Flow batch size");
  density_cmd->add_flag("--class-conditional", da.config.class_conditional,
                        "Score queries with their predicted class density instead of the marginal");
  density_cmd->add_option("--calib-fraction", da.calib_fraction, "Calibration share of the sequential split");

  CalibArgs ca;
  auto* calib_cmd = app.add_subcommand("calib-fit", "Fit post-hoc calibrators on the calibration split");
  add_common(*calib_cmd, common);
  calib_cmd->add_option("--data", ca.data, "Dataset prefix (calibration part is used)")->required();
  calib_cmd->add_option("--density", ca.density, "Density model file");
  calib_cmd->add_option("--out", ca.out, "Calibrator file")->required();
  calib_cmd->add_option("--method", ca.method, "identity|ts|ps|ir|da-ts|da-ps|da-ir|none");
  calib_cmd->add_option("--reg-method", ca.reg_method, "identity|ts|da-ts|depth|none");
  calib_cmd->add_option("--scope", ca.scope, "global or class");
  calib_cmd->add_option("--gamma", ca.gamma, "Classification gain bound")->check(CLI::Range(0.0, 0.999999));
  calib_cmd->add_option("--reg-gamma", ca.reg_gamma, "Regression gain bound")->check(CLI::Range(0.0, 0.999999));
  calib_cmd->add_option("--budget", ca.budget, "Differential Evolution evaluations per fit");
  calib_cmd->add_option("--calib-fraction", ca.calib_fraction, "Calibration share of the sequential split");
  calib_cmd->add_option("--tau", ca.tau, "Matching threshold (m)");

  ApplyArgs aa;
  auto* apply_cmd = app.add_subcommand("apply", "Apply fitted calibrators to a dataset");
  add_common(*apply_cmd, common);
  apply_cmd->add_option("--data", aa.data, "Dataset prefix")->required();
  apply_cmd->add_option("--calibrators", aa.calibrators, "Calibrator file")->required();
  apply_cmd->add_option("--density", aa.density, "Density model file");
  apply_cmd->add_option("--out", aa.out, "Output dataset prefix")->required();
  apply_cmd->add_option("--part", aa.part, "calib, test or all");
  apply_cmd->add_option("--calib-fraction", aa.calib_fraction, "Calibration share of the sequential split");

  EvalArgs ea;
  auto add_eval = [&](CLI::App& cmd) {
    add_common(cmd, common);
    cmd.add_option("--data", ea.data, "Dataset prefix")->required();
    cmd.add_option("--part", ea.part, "calib, test or all");
    cmd.add_option("--thresholds", ea.thresholds, "start:stop:step or a comma list");
    cmd.add_option("--bins", ea.config.classification_bins, "Classification bins")->check(CLI::PositiveNumber);
    cmd.add_option("--levels", ea.config.coverage_levels, "MCA levels")->check(CLI::Range(2, 1000000));
    cmd.add_option("--tau", ea.config.tau, "Matching threshold (m)")->check(CLI::PositiveNumber);
    cmd.add_flag("--pool-xyz", ea.config.pool_xyz, "Pool x/y/z residuals into one MCA");
    cmd.add_option("--calib-fraction", ea.calib_fraction, "Calibration share of the sequential split");
  };
  auto* eval_cmd = app.add_subcommand("evaluate", "Compute the class-wise threshold-sweep report");
  add_eval(*eval_cmd);
  eval_cmd->add_option("--out", ea.out, "Report JSON file");
  auto* report_cmd = app.add_subcommand("report", "Report JSON plus reliability and coverage CSVs");
  add_eval(*report_cmd);
  report_cmd->add_option("--out", ea.out, "Report JSON file (default OUT_DIR/report.json)");
  report_cmd->add_option("--out-dir", ea.out_dir, "Directory for the CSV files")->required();

  std::vector<const char*> argv{"uqcal"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  const WarningCapture capture;
  int code = kExitOk;
  json summary;
  try {
    if (synth_cmd->parsed()) {
      summary = run_synth(sa, common);
    } else if (density_cmd->parsed()) {
      summary = run_density_fit(da, common);
    } else if (calib_cmd->parsed()) {
      summary = run_calib_fit(ca, common);
    } else if (apply_cmd->parsed()) {
      summary = run_apply(aa, common);
    } else if (eval_cmd->parsed()) {
      summary = run_evaluate(ea, common, false);
    } else {
      summary = run_evaluate(ea, common, true);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    code = kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    code = kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    code = kExitValidation;
  }
  for (const auto& w : capture.messages()) err << "warning: " << w << '\n';
  if (code != kExitOk) return code;
  summary["status"] = "ok";
  summary["warnings"] = capture.messages().size();
  out << summary.dump() << '\n';
  return kExitOk;
}

}  // namespace uqcal::cli
