#include "xdetect/config.hpp"

#include <fmt/core.h>
#include <fstream>
#include <set>

namespace xdetect {

namespace fs = std::filesystem;

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(fmt::format("unknown key '{}' in {}", key, where));
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal();
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open '{}'", path.string()));
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("'{}' is not valid JSON: {}", path.string(), e.what()));
  }
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  RunConfig rc;
  rc.base_dir = base_dir;
  try {
    reject_unknown(j, {"model", "mode", "space", "seed", "out", "jobs", "oed", "spd", "attack"}, "run config");
    if (j.contains("model")) rc.model = resolve(base_dir, j["model"].get<std::string>());
    if (j.contains("mode")) rc.mode = parse_detector_mode(j["mode"].get<std::string>());
    if (j.contains("space")) rc.space = parse_space(j["space"].get<std::string>());
    rc.seed = j.value("seed", rc.seed);
    if (j.contains("out")) rc.out = resolve(base_dir, j["out"].get<std::string>());
    else rc.out = base_dir / "out";
    rc.jobs = j.value("jobs", rc.jobs);
    if (rc.jobs < 1) throw ConfigError("jobs must be at least 1");

    if (j.contains("oed")) {
      const auto& o = j["oed"];
      reject_unknown(o, {"k", "n_per_class", "library", "prototypes", "extractor", "sift"}, "oed section");
      rc.oed.k = o.value("k", rc.oed.k);
      rc.oed.n_per_class = o.value("n_per_class", rc.oed.n_per_class);
      if (rc.oed.k < 1) throw ConfigError("oed.k must be at least 1");
      if (rc.oed.n_per_class < 1) throw ConfigError("oed.n_per_class must be at least 1");
      if (o.contains("extractor")) rc.oed.extractor = o["extractor"].get<ExtractorSpec>();
      if (o.contains("sift")) rc.oed.sift = o["sift"].get<sift::SiftParams>();
      if (o.contains("library")) rc.oed.library = resolve(base_dir, o["library"].get<std::string>());
      if (o.contains("prototypes")) rc.oed.prototypes = resolve(base_dir, o["prototypes"].get<std::string>());
    }
    if (j.contains("spd")) {
      const auto& s = j["spd"];
      reject_unknown(s, {"transforms"}, "spd section");
      if (s.contains("transforms")) rc.transforms = s["transforms"].get<TransformSet>();
    }
    if (j.contains("attack")) {
      const auto& a = j["attack"];
      reject_unknown(a, {"config", "model", "manifest", "max_scenes", "target_prototype"}, "attack section");
      RunConfig::Attack at;
      if (a.contains("config")) {
        const nlohmann::json cj =
            a["config"].is_string() ? read_json(resolve(base_dir, a["config"].get<std::string>())) : a["config"];
        at.config = cj.get<AttackConfig>();
        at.patch_side_explicit = cj.contains("patch_side");
      }
      if (a.contains("model")) at.model = resolve(base_dir, a["model"].get<std::string>());
      if (a.contains("manifest")) at.manifest = resolve(base_dir, a["manifest"].get<std::string>());
      at.max_scenes = a.value("max_scenes", at.max_scenes);
      if (a.contains("target_prototype")) at.target_prototype = a["target_prototype"].get<std::string>();
      rc.attack = std::move(at);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("run config: {}", e.what()));
  }
  return rc;
}

RunConfig load_run_config(const fs::path& path) {
  return run_config_from_json(read_json(path), path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

fs::path library_path(const RunConfig& rc) { return rc.oed.library ? *rc.oed.library : rc.out / "library"; }

int default_patch_side(Space space) { return space == Space::physical ? 100 : 120; }

TransformSet transforms_for(const RunConfig& rc) {
  return rc.transforms ? *rc.transforms : default_transform_set(rc.space, rc.seed);
}

DetectorConfig detector_config(const RunConfig& rc) {
  DetectorConfig dc;
  dc.oed.k = rc.oed.k;
  dc.oed.extractor = rc.oed.extractor;
  dc.transforms = transforms_for(rc);
  dc.jobs = rc.jobs;
  return dc;
}

}  // namespace xdetect
