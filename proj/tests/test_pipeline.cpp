#include <gtest/gtest.h>

#include <fstream>

#include "lvfc/pipeline.hpp"

using namespace lvfc;
namespace fs = std::filesystem;

namespace {

nlohmann::json base_config() {
  return nlohmann::json::parse(R"({
    "version": 1,
    "data": {"synthetic": {"households": 50, "seed": 7, "empty_fraction": 0.1}},
    "year": 2013,
    "hierarchy": {"seed": 11, "feeders_per_secondary": [2, 7], "households_per_feeder": [20, 30]},
    "output_dir": "out",
    "evaluation": {"seed": 3, "bootstrap": 100},
    "jobs": 1
  })");
}

std::string error_of(const nlohmann::json& j) {
  try {
    ExperimentConfig::from_json(j);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("lvfc_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Config, ParsesAndResolvesOutput) {
  const auto c = ExperimentConfig::from_json(base_config(), "/tmp/cfg");
  ASSERT_TRUE(c.synthetic.has_value());
  EXPECT_EQ(c.synthetic->households, 50);
  EXPECT_EQ(c.synthetic->seed, 7u);
  EXPECT_EQ(c.hierarchy_seed, 11u);
  EXPECT_EQ(c.evaluation_seed, 3u);
  EXPECT_EQ(c.bootstrap, 100);
  EXPECT_EQ(c.crps_levels, kCrpsLevels);
  EXPECT_EQ(c.limits.feeders_min, 2);
  EXPECT_EQ(c.limits.households_max, 30);
  EXPECT_EQ(c.out(), fs::path("/tmp/cfg/out"));
}

TEST(Config, ValidationErrors) {
  auto j = base_config();
  j["version"] = 2;
  EXPECT_NE(error_of(j).find("version"), std::string::npos);

  j = base_config();
  j["data"]["synthetic"].erase("seed");
  EXPECT_NE(error_of(j).find("data.synthetic.seed"), std::string::npos);

  j = base_config();
  j["hierarchy"].erase("seed");
  EXPECT_NE(error_of(j).find("hierarchy.seed"), std::string::npos);

  j = base_config();
  j["evaluation"].erase("seed");
  EXPECT_NE(error_of(j).find("evaluation.seed"), std::string::npos);

  j = base_config();
  j["data"]["csv"] = "meters.csv";
  EXPECT_NE(error_of(j).find("exactly one"), std::string::npos);

  j = base_config();
  j["data"].erase("synthetic");
  j["data"]["csv"] = "/nonexistent/meters.csv";
  EXPECT_NE(error_of(j).find("not found"), std::string::npos);

  j = base_config();
  j["hierarchy"]["households_per_feeder"] = {20};
  EXPECT_NE(error_of(j).find("households_per_feeder"), std::string::npos);

  j = base_config();
  j["jobs"] = 0;
  EXPECT_NE(error_of(j).find("jobs"), std::string::npos);

  EXPECT_THROW(ExperimentConfig::load("/nonexistent/config.json"), DataError);
  const auto dir = scratch("badjson");
  std::ofstream(dir / "c.json") << "{not json";
  EXPECT_THROW(ExperimentConfig::load(dir / "c.json"), DataError);
}

TEST(Stage, ExitCodes) {
  StageResult r{"fit", 0, {}};
  EXPECT_EQ(r.exit_code(), 0);
  r.ok = 3;
  r.failures = {"feeder 2: too few rows"};
  EXPECT_EQ(r.exit_code(), 2);
  r.ok = 0;
  EXPECT_EQ(r.exit_code(), 1);
  const auto j = r.to_json();
  EXPECT_EQ(j.at("failed"), 1);
  EXPECT_EQ(j.at("stage"), "fit");
}

TEST(Stage, BuildWritesAuditedArtifacts) {
  const auto dir = scratch("build");
  auto c = ExperimentConfig::from_json(base_config(), dir);
  const auto r = cmd_build(c);
  EXPECT_EQ(r.exit_code(), 0);
  const ArtifactPaths P{c.out()};
  ASSERT_TRUE(fs::exists(P.manifest()));
  ASSERT_TRUE(fs::exists(P.build_report()));
  std::ifstream is(P.build_report());
  const auto b = nlohmann::json::parse(is);
  EXPECT_TRUE(b.at("audited").get<bool>());
  EXPECT_EQ(b.at("causality_violations"), 0);
  EXPECT_EQ(b.at("meters_retained"), 50);
  // One primary, one secondary, at least two feeders, every household.
  EXPECT_GE(b.at("nodes").get<int>(), 54);
  EXPECT_TRUE(fs::exists(P.series("ps1")));
}

TEST(Stage, TooFewHouseholdsIsFatal) {
  const auto dir = scratch("few");
  auto j = base_config();
  j["data"]["synthetic"]["households"] = 10;
  const auto c = ExperimentConfig::from_json(j, dir);
  try {
    cmd_build(c);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("short by 10"), std::string::npos) << e.what();
  }
}
