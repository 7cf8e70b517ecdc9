#include <doctest.h>

#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "uqcal/core.hpp"
#include "uqcal/diagnostics.hpp"
#include "uqcal/errors.hpp"
#include "uqcal/math.hpp"

using namespace uqcal;
using nlohmann::json;

namespace {

DatasetHeader header(std::size_t dim) { return {{"car", "truck"}, dim, {}}; }

json detection_json(std::size_t dim) {
  return {{"frame", "f0"},
          {"class", 1},
          {"logit", 0.3},
          {"box",
           {{"center", {3.0, 4.0, 1.0}},
            {"size", {4.0, 2.0, 1.5}},
            {"yaw", 0.2},
            {"center_var", {0.5, 0.25, 0.1}},
            {"size_var", {0.1, 0.1, 0.1}},
            {"yaw_kappa", 2.0}}},
          {"feature", std::vector<double>(dim, 0.5)}};
}

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("parse a well-formed detection line") {
  const auto d = parse_detection_line(detection_json(4).dump(), header(4));
  CHECK(d.frame_id == "f0");
  CHECK(d.class_id == 1);
  CHECK(d.box.center_var[0] == 0.5);
  CHECK(d.box.yaw_kappa == 2.0);
  CHECK(d.score == doctest::Approx(sigmoid(0.3)).epsilon(1e-15));
  CHECK(d.depth == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(!d.box.velocity.has_value());
}

TEST_CASE("negative center variance names the field") {
  auto j = detection_json(4);
  j["box"]["center_var"][0] = -1.0;
  CHECK_THROWS_AS(parse_detection_line(j.dump(), header(4)), ValidationError);
  CHECK(message_of([&] { parse_detection_line(j.dump(), header(4)); }) == "center_var[0] must be > 0");
}

TEST_CASE("feature length must match the declared dimension") {
  const auto j = detection_json(255);
  CHECK_THROWS_AS(parse_detection_line(j.dump(), header(256)), ValidationError);
  CHECK(message_of([&] { parse_detection_line(j.dump(), header(256)); }).find("feature") != std::string::npos);
}

TEST_CASE("other invariant violations") {
  SUBCASE("nonpositive kappa") {
    auto j = detection_json(2);
    j["box"]["yaw_kappa"] = 0.0;
    CHECK(message_of([&] { parse_detection_line(j.dump(), header(2)); }) == "yaw_kappa must be > 0");
  }
  SUBCASE("class out of range") {
    auto j = detection_json(2);
    j["class"] = 2;
    CHECK_THROWS_AS(parse_detection_line(j.dump(), header(2)), ValidationError);
  }
  SUBCASE("score inconsistent with logit") {
    auto j = detection_json(2);
    j["score"] = 0.9;
    CHECK(message_of([&] { parse_detection_line(j.dump(), header(2)); }) == "score must equal sigmoid(logit)");
  }
  SUBCASE("depth inconsistent with center") {
    auto j = detection_json(2);
    j["depth"] = 4.0;
    CHECK_THROWS_AS(parse_detection_line(j.dump(), header(2)), ValidationError);
  }
  SUBCASE("nonpositive ground-truth size") {
    const json g = {{"frame", "f0"}, {"class", 0}, {"center", {0, 0, 0}}, {"size", {1, 0, 1}}, {"yaw", 0}};
    CHECK_THROWS_AS(parse_ground_truth_line(g.dump(), header(2)), ValidationError);
  }
}

TEST_CASE("malformed JSON is a parse error with the line number") {
  try {
    parse_detection_line("{\"frame\": ", header(2), 7);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 7);
    CHECK(std::string(e.what()).rfind("line 7:", 0) == 0);
  }
  CHECK_THROWS_AS(parse_detection_line("[1, 2]", header(2), 3), ParseError);
  auto j = detection_json(2);
  j.erase("logit");
  CHECK_THROWS_AS(parse_detection_line(j.dump(), header(2), 1), ParseError);
}

TEST_CASE("yaw is wrapped to [-pi, pi) on construction") {
  ProbabilisticBox b;
  b.yaw = kPi;
  const auto d = make_detection("f", 0, 0.0, b, {0.0, 0.0});
  CHECK(d.box.yaw == doctest::Approx(-kPi));
  CHECK(wrap_angle(-kPi) == -kPi);
  CHECK(wrap_angle(3.0 * kPi) == doctest::Approx(-kPi));
  CHECK(wrap_angle(kPi - 1e-12) < kPi);
}

TEST_CASE("detection round trip is exact for random records") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  std::uniform_real_distribution<double> pos(1e-3, 10.0);
  const auto h = header(6);
  for (int i = 0; i < 200; ++i) {
    ProbabilisticBox b;
    b.center = {u(rng), u(rng), u(rng) / 10.0};
    b.size = {pos(rng), pos(rng), pos(rng)};
    b.yaw = u(rng);
    if (i % 2 == 0) b.velocity = std::array<double, 2>{u(rng), u(rng)};
    b.center_var = {pos(rng), pos(rng), pos(rng)};
    b.size_var = {pos(rng), pos(rng), pos(rng)};
    b.yaw_kappa = pos(rng);
    const auto d = make_detection("f" + std::to_string(i), i % 2, u(rng) / 5.0, b, test::uniform_vector(rng, 6, -3, 3));
    const auto back = parse_detection_line(serialize_detection(d), h);
    CHECK(back.frame_id == d.frame_id);
    CHECK(back.class_id == d.class_id);
    CHECK(back.logit == d.logit);
    CHECK(back.score == d.score);
    CHECK(back.depth == d.depth);
    CHECK(back.box.center == d.box.center);
    CHECK(back.box.size == d.box.size);
    CHECK(back.box.yaw == d.box.yaw);
    CHECK(back.box.velocity == d.box.velocity);
    CHECK(back.box.center_var == d.box.center_var);
    CHECK(back.box.size_var == d.box.size_var);
    CHECK(back.box.yaw_kappa == d.box.yaw_kappa);
    CHECK(back.query_feature == d.query_feature);
  }
}

TEST_CASE("dataset save and load round trip") {
  test::TempDir dir;
  Dataset ds = test::grid_dataset(3, 2, 4);
  save_dataset(ds, dir / "set");
  CHECK(std::filesystem::exists(dir / "set.det.jsonl"));
  CHECK(std::filesystem::exists(dir / "set.gt.jsonl"));
  const Dataset back = load_dataset(dir / "set");
  CHECK(back.frames == ds.frames);
  CHECK(back.class_names == ds.class_names);
  CHECK(back.feature_dim == 4);
  REQUIRE(back.detections.size() == ds.detections.size());
  CHECK(serialize_detection(back.detections[3]) == serialize_detection(ds.detections[3]));
  CHECK(back.ground_truths.size() == ds.ground_truths.size());
}

TEST_CASE("a bad record in a file names the file and line") {
  test::TempDir dir;
  save_dataset(test::grid_dataset(2, 1, 2), dir / "set");
  const auto path = dir / "set.det.jsonl";
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  in.close();
  auto j = json::parse(lines[2]);
  j["box"]["size_var"][1] = 0.0;
  lines[2] = j.dump();
  std::ofstream out(path);
  for (const auto& l : lines) out << l << '\n';
  out.close();
  const std::string msg = message_of([&] { load_dataset(dir / "set"); });
  CHECK(msg.find("set.det.jsonl:3") != std::string::npos);
  CHECK(msg.find("size_var[1]") != std::string::npos);
  CHECK_THROWS_AS(load_dataset(dir / "missing"), ValidationError);
}

TEST_CASE("sequential split follows the 40/60 ceiling rule") {
  SUBCASE("10 frames at 0.4") {
    const auto [a, b] = sequential_split(test::grid_dataset(10), 0.4);
    CHECK(a.frames == std::vector<std::string>{"f0", "f1", "f2", "f3"});
    CHECK(b.frames.size() == 6);
    CHECK(b.frames.front() == "f4");
  }
  SUBCASE("7 frames at 0.5") {
    const auto [a, b] = sequential_split(test::grid_dataset(7), 0.5);
    CHECK(a.frames.size() == 4);
    CHECK(b.frames.size() == 3);
  }
  SUBCASE("1 frame leaves an empty test part with a warning") {
    WarningCapture cap;
    const auto [a, b] = sequential_split(test::grid_dataset(1), 0.4);
    CHECK(a.frames.size() == 1);
    CHECK(b.frames.empty());
    CHECK(b.detections.empty());
    CHECK(cap.messages().size() == 1);
  }
  SUBCASE("empty dataset and bad fractions") {
    Dataset empty;
    empty.class_names = {"a"};
    CHECK_THROWS_AS(sequential_split(empty, 0.4), ValidationError);
    CHECK_THROWS_AS(sequential_split(test::grid_dataset(3), 0.0), ConfigError);
    CHECK_THROWS_AS(sequential_split(test::grid_dataset(3), 1.0), ConfigError);
  }
}

TEST_CASE("split is an order-preserving partition") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t frames = 1 + rng() % 30;
    const double fraction = std::uniform_real_distribution<double>(0.05, 0.95)(rng);
    const Dataset ds = test::grid_dataset(frames, 3);
    WarningCapture cap;
    const auto [a, b] = sequential_split(ds, fraction);
    CHECK(a.detections.size() + b.detections.size() == ds.detections.size());
    CHECK(a.ground_truths.size() + b.ground_truths.size() == ds.ground_truths.size());
    std::vector<std::string> joined = a.frames;
    joined.insert(joined.end(), b.frames.begin(), b.frames.end());
    CHECK(joined == ds.frames);
    const Dataset back = concatenate(a, b);
    CHECK(back.frames == ds.frames);
    CHECK(back.detections.size() == ds.detections.size());
  }
}
