#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "uqcal/cli.hpp"
#include "uqcal/core.hpp"

using namespace uqcal;
using nlohmann::json;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
  json summary() const { return json::parse(out); }
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> synth_args(const std::filesystem::path& dir, std::size_t classes = 2) {
  return {"synth", "--seed", "7", "--severity", "0", "--out", dir.string(), "--classes", std::to_string(classes),
          "--feature-dim", "4", "--train-frames", "60", "--calib-frames", "30", "--test-frames", "40"};
}

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    ::setenv(name, value, 1);
  }
  ~ScopedEnv() {
    if (old_.empty()) {
      ::unsetenv(name_);
    } else {
      ::setenv(name_, old_.c_str(), 1);
    }
  }
  ScopedEnv(const ScopedEnv&) = delete;
  ScopedEnv& operator=(const ScopedEnv&) = delete;

 private:
  const char* name_;
  std::string old_;
};

// Full pipeline into `dir`; returns the report JSON bytes.
std::string pipeline(const test::TempDir& dir) {
  const auto root = dir.path();
  REQUIRE(run(synth_args(root / "data")).code == 0);
  const std::string val = (root / "data" / "val").string();
  REQUIRE(run({"density-fit", "--train", (root / "data" / "train").string(), "--calib", val, "--out",
               (root / "density.json").string(), "--estimator", "gmm", "--components", "2"})
              .code == 0);
  REQUIRE(run({"calib-fit", "--data", val, "--density", (root / "density.json").string(), "--out",
               (root / "cal.json").string(), "--method", "da-ps", "--reg-method", "da-ts", "--budget", "300"})
              .code == 0);
  REQUIRE(run({"apply", "--data", val, "--calibrators", (root / "cal.json").string(), "--density",
               (root / "density.json").string(), "--out", (root / "calibrated").string(), "--part", "test"})
              .code == 0);
  const auto r = run({"report", "--data", (root / "calibrated").string(), "--out-dir", (root / "report").string(),
                      "--no-timestamp"});
  REQUIRE(r.code == 0);
  return read_file(root / "report" / "report.json");
}

int run_binary(const std::string& args) {
  const std::string cmd = std::string(UQCAL_TOOL_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("usage errors exit with 2 and print help") {
  CHECK(run({}).code == cli::kExitUsage);
  const auto unknown = run({"frobnicate"});
  CHECK(unknown.code == cli::kExitUsage);
  const auto bad_flag = run({"evaluate", "--data", "x", "--bogus"});
  CHECK(bad_flag.code == cli::kExitUsage);
  CHECK(bad_flag.err.find("--thresholds") != std::string::npos);
  CHECK(bad_flag.out.empty());
  CHECK(run({"evaluate"}).code == cli::kExitUsage);
  CHECK(run({"calib-fit", "--data", "x", "--out", "y", "--gamma", "1.5"}).code == cli::kExitUsage);
  const auto help = run({"synth", "--help"});
  CHECK(help.code == cli::kExitOk);
  CHECK(help.err.find("--severity") != std::string::npos);
}

TEST_CASE("synth then evaluate reports per-class D-ECE") {
  test::TempDir dir;
  const auto s = run(synth_args(dir.path()));
  REQUIRE(s.code == 0);
  CHECK(std::count(s.out.begin(), s.out.end(), '\n') == 1);
  const auto summary = s.summary();
  CHECK(summary.at("command") == "synth");
  CHECK(summary.at("status") == "ok");
  CHECK(summary.at("seed") == 7);
  CHECK(std::filesystem::exists(dir / "truth.json"));
  CHECK(std::filesystem::exists(dir / "train.det.jsonl"));
  CHECK(std::filesystem::exists(dir / "val.gt.jsonl"));

  const auto e = run({"evaluate", "--data", (dir / "val").string(), "--thresholds", "0.05:0.60:0.05", "--out",
                      (dir / "report.json").string(), "--no-timestamp"});
  REQUIRE(e.code == 0);
  CHECK(e.summary().at("thresholds") == 12);
  CHECK(e.summary().contains("d_ece"));
  const auto report = json::parse(read_file(dir / "report.json"));
  CHECK(report.at("results").at("per_threshold").size() == 12);
  CHECK(report.at("results").at("per_class").at("car").contains("d_ece"));
  CHECK(report.at("results").at("per_class").at("truck").contains("d_ece"));
  CHECK_FALSE(report.contains("generated_at"));

  const auto partial = run({"evaluate", "--data", (dir / "val").string(), "--thresholds", "0.1,0.2", "--part", "test"});
  REQUIRE(partial.code == 0);
  CHECK(partial.summary().at("thresholds") == 2);
  CHECK(partial.summary().at("part") == "test");
}

TEST_CASE("class-wise fit on a split lacking a class warns and succeeds") {
  test::TempDir dir;
  REQUIRE(run(synth_args(dir.path(), 4)).code == 0);
  Dataset val = load_dataset(dir / "val");
  std::erase_if(val.detections, [](const DetectionRecord& d) { return d.class_id == 3; });
  std::erase_if(val.ground_truths, [](const GroundTruthRecord& g) { return g.class_id == 3; });
  save_dataset(val, dir / "val3");
  REQUIRE(run({"density-fit", "--train", (dir / "train").string(), "--calib", (dir / "val3").string(), "--out",
               (dir / "density.json").string(), "--estimator", "gmm", "--components", "1"})
              .code == 0);
  const auto r = run({"calib-fit", "--data", (dir / "val3").string(), "--density", (dir / "density.json").string(),
                      "--out", (dir / "cal.json").string(), "--method", "da-ts", "--scope", "class", "--budget", "200"});
  CHECK(r.code == 0);
  CHECK(r.err.find("warning: identity calibrator for class 3") != std::string::npos);
  CHECK(r.summary().at("warnings").get<int>() >= 1);
  CHECK(r.summary().at("scope") == "class");
}

TEST_CASE("density-aware methods require a density model") {
  test::TempDir dir;
  REQUIRE(run(synth_args(dir.path())).code == 0);
  const auto r = run({"calib-fit", "--data", (dir / "val").string(), "--out", (dir / "cal.json").string(), "--method",
                      "da-ir"});
  CHECK(r.code == cli::kExitUsage);
  CHECK(r.err.find("--density") != std::string::npos);
  CHECK(run({"calib-fit", "--data", (dir / "val").string(), "--out", (dir / "cal.json").string(), "--method", "none"})
            .code == cli::kExitUsage);
  CHECK(run({"calib-fit", "--data", (dir / "val").string(), "--out", (dir / "cal.json").string(), "--method",
             "bogus"})
            .code == cli::kExitUsage);
}

TEST_CASE("invalid input records exit with 1 naming file and line") {
  test::TempDir dir;
  REQUIRE(run(synth_args(dir.path())).code == 0);
  auto text = read_file(dir / "val.det.jsonl");
  // corrupt the second record
  const auto first = text.find('\n', text.find('\n') + 1);
  const auto second = text.find('\n', first + 1);
  text.replace(first + 1, second - first - 1, "{\"frame_id\": 3}");
  std::ofstream(dir / "val.det.jsonl", std::ios::binary) << text;
  const auto r = run({"evaluate", "--data", (dir / "val").string()});
  CHECK(r.code == cli::kExitValidation);
  CHECK(r.err.find("val.det.jsonl: line 3") != std::string::npos);
  CHECK(run({"evaluate", "--data", (dir / "missing").string()}).code == cli::kExitValidation);
}

TEST_CASE("identical command sequences give byte-identical reports") {
  test::TempDir a, b;
  const auto first = pipeline(a);
  const auto second = pipeline(b);
  CHECK(first == second);
  CHECK(json::parse(first).at("results").at("per_threshold").size() == 12);
  for (const char* name : {"reliability.csv", "coverage_xyz.csv", "coverage_lwh.csv", "coverage_yaw.csv"}) {
    CHECK(read_file(a / "report" / name) == read_file(b / "report" / name));
  }
  CHECK(load_dataset(a / "calibrated").detections.size() > 0);
}

TEST_CASE("UQCAL_SEED is the seed fallback") {
  test::TempDir explicit_seed, env_seed, other;
  REQUIRE(run(synth_args(explicit_seed.path())).code == 0);
  {
    ScopedEnv env("UQCAL_SEED", "7");
    auto args = synth_args(env_seed.path());
    args.erase(args.begin() + 1, args.begin() + 3);
    const auto r = run(args);
    REQUIRE(r.code == 0);
    CHECK(r.summary().at("seed") == 7);
    auto other_args = synth_args(other.path());
    other_args[2] = "8";
    REQUIRE(run(other_args).code == 0);
  }
  CHECK(read_file(explicit_seed / "val.det.jsonl") == read_file(env_seed / "val.det.jsonl"));
  CHECK(read_file(explicit_seed / "val.det.jsonl") != read_file(other / "val.det.jsonl"));
  ScopedEnv bad("UQCAL_SEED", "seven");
  auto args = synth_args(env_seed.path());
  args.erase(args.begin() + 1, args.begin() + 3);
  CHECK(run(args).code == cli::kExitUsage);
}

TEST_CASE("the installed tool reports exit codes") {
  CHECK(run_binary("--help") == 0);
  CHECK(run_binary("") == 2);
  CHECK(run_binary("evaluate --data x --nope") == 2);
  CHECK(run_binary("evaluate --data /nonexistent/prefix") == 1);
}
