#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "xdetect/attack.hpp"
#include "xdetect/ensemble.hpp"
#include "xdetect/extraction.hpp"
#include "xdetect/sift.hpp"
#include "xdetect/spd.hpp"

namespace xdetect {

/// One JSON document per run. Relative paths resolve against the
/// directory holding the config file.
///
/// {
///   "model": "model.json",
///   "mode": "two_tier", "space": "digital", "seed": 0, "out": "out", "jobs": 1,
///   "oed": {"k": 7, "n_per_class": 10, "library": "out/library", "prototypes": "prototypes",
///           "extractor": {...}, "sift": {...}},
///   "spd": {"transforms": [{"kind": "blur", "strength": 6}, ...]},
///   "attack": {"config": {...} | "attack.json", "model": "toy.json", "manifest": "manifest.json",
///              "max_scenes": 8, "target_prototype": "000-000"}
/// }
struct RunConfig {
  std::filesystem::path base_dir = ".";
  std::optional<std::filesystem::path> model;
  DetectorMode mode = DetectorMode::two_tier;
  Space space = Space::digital;
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";
  int jobs = 1;

  struct Oed {
    int k = 7;
    int n_per_class = 10;
    ExtractorSpec extractor;
    sift::SiftParams sift;
    std::optional<std::filesystem::path> library;
    std::optional<std::filesystem::path> prototypes;
  } oed;

  std::optional<TransformSet> transforms;  // nullopt: default set for `space`

  struct Attack {
    AttackConfig config;
    std::optional<std::filesystem::path> model;
    std::optional<std::filesystem::path> manifest;
    int max_scenes = 8;
    std::optional<std::string> target_prototype;
    bool patch_side_explicit = false;  // otherwise the space preset decides
  };
  std::optional<Attack> attack;
};

RunConfig load_run_config(const std::filesystem::path& path);
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);

/// Library location: oed.library, else <out>/library.
std::filesystem::path library_path(const RunConfig& rc);
TransformSet transforms_for(const RunConfig& rc);
/// Patch side preset per space: 120 digital, 100 physical.
int default_patch_side(Space space);
DetectorConfig detector_config(const RunConfig& rc);

}  // namespace xdetect
