#include "xdetect/ensemble.hpp"

#include <chrono>
#include <fmt/core.h>

#include "xdetect/imaging.hpp"
#include "xdetect/log.hpp"

namespace xdetect {

std::string to_string(DetectorMode m) {
  switch (m) {
    case DetectorMode::oed_only: return "oed_only";
    case DetectorMode::spd_only: return "spd_only";
    case DetectorMode::mv: return "mv";
    case DetectorMode::two_tier: return "two_tier";
  }
  return "?";
}

DetectorMode parse_detector_mode(const std::string& s) {
  for (auto m : kAllModes) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError(fmt::format("unknown detector mode '{}' (oed_only|spd_only|mv|two_tier)", s));
}

bool decide_alert(std::optional<ClassId> detector_class, ClassId target_class) {
  return detector_class.has_value() && *detector_class != target_class;
}

MvResult mv_ensemble(const std::optional<ClassDistribution>& oed, const std::optional<ClassDistribution>& spd) {
  MvResult r;
  if (!oed && !spd) return r;
  ClassDistribution sum;
  if (oed && spd) {
    sum = *oed + *spd;
  } else {
    sum = oed ? *oed : *spd;
  }
  if (!(sum.sum() > 0.0)) return r;
  r.class_id = sum.argmax();
  r.distribution = sum.normalized();
  return r;
}

namespace {

void run_oed_stage(const Image& scene, const ModelOutput& out, const PrototypeLibrary& lib, const DetectorConfig& cfg,
                   Explanation& ex, bool want_overlay) {
  OedConfig oc = cfg.oed;
  oc.jobs = cfg.jobs;
  OedResult r = oed_classify(scene, out, lib, oc);
  ex.oed_run = true;
  ex.oed_class = r.class_id;
  ex.oed_votes = r.votes;
  if (r.inconclusive()) {
    ex.notes.push_back("oed inconclusive: " + r.note);
    return;
  }
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, oc.k)), r.scores.size());
  for (std::size_t i = 0; i < k && r.scores[i].match_count > 0; ++i) ex.prototype_votes.push_back(r.scores[i]);
  if (want_overlay && *r.class_id != out.class_id) {
    if (const PrototypeEntry* best = lib.find(r.scores.front().prototype_id)) {
      ex.match_overlay = render_match_overlay(r.extraction.image, r.query, *best, lib.sift_params().match_ratio);
    }
  }
}

void run_spd_stage(const Image& scene, const TargetModel& model, const DetectorConfig& cfg, Explanation& ex) {
  SpdResult r = spd_classify(scene, model, cfg.transforms, cfg.jobs);
  ex.spd_run = true;
  ex.spd_class = r.class_id;
  ex.spd_distribution = r.aggregated;
  ex.per_transform_table = std::move(r.table);
  if (r.inconclusive()) ex.notes.push_back("spd inconclusive: no detection under any transform");
}

const PrototypeLibrary& need_library(const PrototypeLibrary* lib, DetectorMode mode) {
  if (!lib) throw ConfigError(fmt::format("mode {} needs a prototype library", to_string(mode)));
  return *lib;
}

}  // namespace

Verdict two_tier(const Image& scene, const ModelOutput& model_output, const TargetModel& model,
                 const PrototypeLibrary& lib, const DetectorConfig& cfg) {
  Verdict v;
  v.mode = DetectorMode::two_tier;
  v.target_class = model_output.class_id;
  run_spd_stage(scene, model, cfg, v.explanation);
  const auto spd_class = v.explanation.spd_class;
  if (spd_class && *spd_class == model_output.class_id) {
    v.detector_class = spd_class;
    v.alert = false;
    return v;
  }
  if (!spd_class) v.explanation.notes.push_back("two_tier: spd inconclusive, passing to oed");
  run_oed_stage(scene, model_output, lib, cfg, v.explanation, cfg.overlay_on_alert);
  v.detector_class = v.explanation.oed_class;
  v.alert = decide_alert(v.detector_class, v.target_class);
  if (!v.detector_class) v.explanation.notes.push_back("no alert: detector inconclusive");
  return v;
}

Verdict run_detector(const Image& scene, const TargetModel& model, DetectorMode mode, const PrototypeLibrary* lib,
                     const DetectorConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  const auto target = model.predict(scene);
  if (!target) throw PredictionError("target model detected no object in the scene");
  Verdict v;
  try {
    switch (mode) {
      case DetectorMode::oed_only:
        v.target_class = target->class_id;
        run_oed_stage(scene, *target, need_library(lib, mode), cfg, v.explanation, cfg.overlay_on_alert);
        v.detector_class = v.explanation.oed_class;
        break;
      case DetectorMode::spd_only:
        v.target_class = target->class_id;
        run_spd_stage(scene, model, cfg, v.explanation);
        v.detector_class = v.explanation.spd_class;
        break;
      case DetectorMode::mv: {
        v.target_class = target->class_id;
        run_spd_stage(scene, model, cfg, v.explanation);
        run_oed_stage(scene, *target, need_library(lib, mode), cfg, v.explanation, cfg.overlay_on_alert);
        const auto mv = mv_ensemble(v.explanation.oed_votes, v.explanation.spd_distribution);
        v.detector_class = mv.class_id;
        break;
      }
      case DetectorMode::two_tier:
        v = two_tier(scene, *target, model, need_library(lib, mode), cfg);
        break;
    }
  } catch (const Error& e) {
    throw PredictionError(fmt::format("{} detector: {}", to_string(mode), e.what()));
  }
  v.mode = mode;
  v.alert = decide_alert(v.detector_class, v.target_class);
  if (!v.detector_class && mode != DetectorMode::two_tier) v.explanation.notes.push_back("no alert: detector inconclusive");
  if (!v.alert) v.explanation.match_overlay.reset();
  v.latency_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return v;
}

nlohmann::json verdict_to_json(const Verdict& v, const ClassRegistry* classes) {
  auto class_json = [&](std::optional<ClassId> c) -> nlohmann::json {
    if (!c) return nullptr;
    return *c;
  };
  nlohmann::json j;
  j["alert"] = v.alert;
  j["target_class"] = v.target_class;
  j["detector_class"] = class_json(v.detector_class);
  j["mode"] = to_string(v.mode);
  j["latency_s"] = v.latency_s;
  j["explanation_paths"] = v.explanation_paths;

  nlohmann::json ex;
  const auto& e = v.explanation;
  if (classes) {
    ex["target_name"] = classes->name(v.target_class);
    ex["detector_name"] = v.detector_class ? nlohmann::json(classes->name(*v.detector_class)) : nlohmann::json(nullptr);
  }
  if (e.spd_run) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : e.per_transform_table) {
      rows.push_back({{"transform", row.spec}, {"class_id", class_json(row.class_id)}, {"confidence", row.confidence}});
    }
    ex["per_transform_table"] = rows;
    ex["spd_class"] = class_json(e.spd_class);
  }
  if (e.oed_run) {
    nlohmann::json votes = nlohmann::json::array();
    for (const auto& s : e.prototype_votes) {
      votes.push_back({{"prototype_id", s.prototype_id}, {"class_id", s.class_id}, {"match_count", s.match_count}});
    }
    ex["prototype_votes"] = votes;
    ex["oed_class"] = class_json(e.oed_class);
  }
  ex["notes"] = e.notes;
  j["explanation"] = ex;
  return j;
}

void write_explanation(Verdict& v, const std::filesystem::path& dir, const std::string& stem) {
  if (!v.explanation.match_overlay) return;
  std::filesystem::create_directories(dir);
  const auto path = dir / (stem + "_matches.png");
  write_png(*v.explanation.match_overlay, path);
  v.explanation_paths.push_back(path.string());
}

}  // namespace xdetect
