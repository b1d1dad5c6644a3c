#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "snl/config.hpp"
#include "snl/experiments.hpp"

using namespace snl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "snl_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

int run_cli(const std::string& args, const fs::path& cwd) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" SNL_CLI_PATH "' " + args + " > cli.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kTiny = R"({
  "scenario": {"kind": "crossroad", "snapshots_per_route": 1, "grid_g": 8},
  "camera": {"resolution": 32},
  "out": "tiny.snld"
})";

}  // namespace

TEST(ConfigHash, CanonicalAndSensitive) {
  const json a = json::parse(R"({"train": {"lr": 0.001, "epochs": 3}, "seed": 1})");
  const json b = json::parse(R"({"seed": 1, "train": {"epochs": 3, "lr": 0.001}})");
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  json c = a;
  c["seed"] = 2;
  EXPECT_NE(config_hash(a), config_hash(c));
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
}

TEST(ConfigParse, DefaultsAndOverrides) {
  const ScenarioSpec s = scenario_from_json(json::parse(R"({"kind": "wide_lane", "altitude": 80})"));
  EXPECT_EQ(s.kind, ScenarioKind::WideLane);
  EXPECT_EQ(s.altitude, 80.0);
  const TrainConfig t = train_from_json(json::parse(R"({"epochs": 3, "lr": 0.01})"));
  EXPECT_EQ(t.epochs, 3);
  EXPECT_EQ(t.adam.lr, 0.01);
  EXPECT_EQ(t.batch_size, TrainConfig{}.batch_size);
  EXPECT_EQ(train_from_json(to_json(t)).adam.lr, t.adam.lr);
}

TEST(ConfigParse, RejectsUnknownKeysAndWrongTypes) {
  EXPECT_THROW(scenario_from_json(json::parse(R"({"buildings": 3})")), ConfigError);
  EXPECT_THROW(scenario_from_json(json::parse(R"({"kind": "canyon"})")), ConfigError);
  EXPECT_THROW(train_from_json(json::parse(R"({"epochs": "many"})")), ConfigError);
  EXPECT_THROW(train_from_json(json::parse(R"({"batch_size": 0})")), ConfigError);
  EXPECT_THROW(model_spec_from_json(json::parse(R"({"kind": "fusion", "width": 3})")), ConfigError);
  EXPECT_THROW(load_json_file("/nonexistent/snl.json"), ConfigError);
}

TEST(Cli, GenWritesLoadableDataset) {
  const fs::path dir = scratch("gen");
  write_file(dir / "tiny.json", kTiny);
  ASSERT_EQ(run_cli("gen --config tiny.json", dir), 0);
  const Dataset ds = load_dataset((dir / "tiny.snld").string());
  EXPECT_EQ(ds.meta.g, 8);
  EXPECT_EQ(ds.image_resolution, 32);
  EXPECT_EQ(ds.samples.size(), ds.route_ids().size());
}

TEST(Cli, SeedFlagChangesScenario) {
  const fs::path dir = scratch("seed");
  write_file(dir / "tiny.json", kTiny);
  ASSERT_EQ(run_cli("gen --config tiny.json --out a.snld", dir), 0);
  ASSERT_EQ(run_cli("gen --config tiny.json --out b.snld --seed 99", dir), 0);
  const Dataset a = load_dataset((dir / "a.snld").string());
  const Dataset b = load_dataset((dir / "b.snld").string());
  EXPECT_NE(a.samples[0].labels.values, b.samples[0].labels.values);
}

TEST(Cli, ConfigErrorsExitWithTwo) {
  const fs::path dir = scratch("config");
  write_file(dir / "typo.json", R"({"scenaro": {}})");
  EXPECT_EQ(run_cli("gen --config typo.json", dir), 2);
  write_file(dir / "broken.json", "{");
  EXPECT_EQ(run_cli("gen --config broken.json", dir), 2);
  EXPECT_EQ(run_cli("gen --config missing.json", dir), 2);
  EXPECT_EQ(run_cli("train --threads 0", dir), 2);
  EXPECT_EQ(run_cli("frobnicate", dir), 2);
}

TEST(Cli, MissingDatasetExitsWithThree) {
  const fs::path dir = scratch("data");
  EXPECT_EQ(run_cli("eval --dataset nowhere.snld --checkpoint nowhere.snlm", dir), 3);
  write_file(dir / "junk.snld", "not a dataset");
  EXPECT_EQ(run_cli("train --dataset junk.snld", dir), 3);
}

TEST(Cli, ShippedConfigsParse) {
  for (const auto& entry : fs::directory_iterator(fs::path(SNL_SOURCE_DIR) / "configs")) {
    if (entry.path().extension() != ".json") continue;
    const json root = load_json_file(entry.path().string());
    EXPECT_NO_THROW(scenario_from_json(section(root, "scenario"))) << entry.path();
    EXPECT_NO_THROW(train_from_json(section(root, "train"))) << entry.path();
  }
}
