#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "xdetect/config.hpp"

using namespace xdetect;
namespace fs = std::filesystem;

TEST_SUITE("config") {

TEST_CASE("defaults") {
  const RunConfig rc = run_config_from_json(nlohmann::json::object(), "/data/run");
  CHECK(rc.mode == DetectorMode::two_tier);
  CHECK(rc.space == Space::digital);
  CHECK(rc.oed.k == 7);
  CHECK(rc.out == fs::path("/data/run/out"));
  CHECK(library_path(rc) == fs::path("/data/run/out/library"));
  CHECK_FALSE(rc.attack.has_value());
  const auto dc = detector_config(rc);
  CHECK(dc.oed.k == 7);
  CHECK(dc.transforms.size() == 4);
  CHECK(default_patch_side(Space::digital) == 120);
  CHECK(default_patch_side(Space::physical) == 100);
}

TEST_CASE("paths resolve against the config directory") {
  const nlohmann::json j{{"model", "models/m.json"},
                         {"out", "../results"},
                         {"space", "physical"},
                         {"seed", 4},
                         {"oed", {{"k", 3}, {"library", "/abs/lib"}, {"prototypes", "./protos"}}},
                         {"spd", {{"transforms", {{{"kind", "blur"}, {"strength", 3}}}}}}};
  const RunConfig rc = run_config_from_json(j, "/data/run");
  CHECK(*rc.model == fs::path("/data/run/models/m.json"));
  CHECK(rc.out == fs::path("/data/results"));
  CHECK(library_path(rc) == fs::path("/abs/lib"));
  CHECK(*rc.oed.prototypes == fs::path("/data/run/protos"));
  CHECK(transforms_for(rc).size() == 1);
  CHECK(detector_config(rc).oed.k == 3);

  const RunConfig preset = run_config_from_json({{"space", "physical"}, {"seed", 4}}, "/x");
  const auto set = transforms_for(preset);
  REQUIRE(set.size() == 5);
  CHECK(set.specs()[2].seed.has_value());
}

TEST_CASE("unknown keys and bad values are rejected") {
  CHECK_THROWS_AS(run_config_from_json({{"modee", "mv"}}, "."), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"oed", {{"kk", 3}}}}, "."), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"spd", {{"set", 1}}}}, "."), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"attack", {{"budget", 1}}}}, "."), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"mode", "committee"}}, "."), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"space", "orbital"}}, "."), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"jobs", 0}}, "."), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"oed", {{"k", 0}}}}, "."), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"seed", "seven"}}, "."), ConfigError);
}

TEST_CASE("attack section from a file") {
  const fs::path dir = fs::temp_directory_path() / "xdetect_config_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream a(dir / "attack.json");
    a << R"({"epsilon": 0.01, "iterations": 5, "target_class": 2})";
    std::ofstream c(dir / "config.json");
    c << R"({"attack": {"config": "attack.json", "model": "toy.json", "manifest": "m.json", "max_scenes": 3,
             "target_prototype": "002-001"}})";
  }
  const RunConfig rc = load_run_config(dir / "config.json");
  REQUIRE(rc.attack.has_value());
  CHECK(rc.attack->config.epsilon == 0.01);
  CHECK(rc.attack->config.iterations == 5);
  CHECK(rc.attack->config.target_class == 2);
  CHECK_FALSE(rc.attack->patch_side_explicit);
  CHECK(*rc.attack->model == (dir / "toy.json").lexically_normal());
  CHECK(rc.attack->max_scenes == 3);
  CHECK(rc.attack->target_prototype == "002-001");

  const RunConfig inline_cfg = run_config_from_json({{"attack", {{"config", {{"patch_side", 64}}}}}}, dir);
  CHECK(inline_cfg.attack->patch_side_explicit);
  CHECK(inline_cfg.attack->config.patch_side == 64);

  CHECK_THROWS_AS(load_run_config(dir / "missing.json"), IoError);
  {
    std::ofstream bad(dir / "bad.json");
    bad << "{not json";
  }
  CHECK_THROWS_AS(load_run_config(dir / "bad.json"), ConfigError);
  fs::remove_all(dir);
}

}  // TEST_SUITE
