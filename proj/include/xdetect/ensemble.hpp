#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xdetect/core.hpp"
#include "xdetect/models.hpp"
#include "xdetect/oed.hpp"
#include "xdetect/spd.hpp"

namespace xdetect {

enum class DetectorMode { oed_only, spd_only, mv, two_tier };

std::string to_string(DetectorMode m);
DetectorMode parse_detector_mode(const std::string& s);
inline constexpr DetectorMode kAllModes[] = {DetectorMode::oed_only, DetectorMode::spd_only, DetectorMode::mv,
                                             DetectorMode::two_tier};

struct Explanation {
  bool oed_run = false;
  bool spd_run = false;
  std::optional<Image> match_overlay;
  std::vector<TransformOutcome> per_transform_table;
  std::vector<PrototypeScore> prototype_votes;  // the k neighbours that voted
  std::optional<ClassDistribution> oed_votes;
  std::optional<ClassDistribution> spd_distribution;
  std::optional<ClassId> oed_class;
  std::optional<ClassId> spd_class;
  std::vector<std::string> notes;
};

struct Verdict {
  bool alert = false;
  ClassId target_class = 0;
  std::optional<ClassId> detector_class;  // nullopt: inconclusive
  DetectorMode mode = DetectorMode::two_tier;
  double latency_s = 0.0;
  Explanation explanation;
  std::vector<std::string> explanation_paths;
};

/// True iff a conclusive detector class differs from the target class.
bool decide_alert(std::optional<ClassId> detector_class, ClassId target_class);

struct MvResult {
  std::optional<ClassId> class_id;
  std::optional<ClassDistribution> distribution;
};

/// Sum of the two distributions; a missing side falls back to the other.
MvResult mv_ensemble(const std::optional<ClassDistribution>& oed, const std::optional<ClassDistribution>& spd);

struct DetectorConfig {
  OedConfig oed;
  TransformSet transforms;
  bool overlay_on_alert = true;
  int jobs = 1;
};

/// SPD first; OED only when the SPD disagrees with the target or is
/// inconclusive. Final alert is the OED's disagreement.
Verdict two_tier(const Image& scene, const ModelOutput& model_output, const TargetModel& model,
                 const PrototypeLibrary& lib, const DetectorConfig& cfg);

/// Queries the model, runs the selected detector and times the whole call.
/// `lib` may be null for spd_only. Throws PredictionError when the model
/// finds no object.
Verdict run_detector(const Image& scene, const TargetModel& model, DetectorMode mode, const PrototypeLibrary* lib,
                     const DetectorConfig& cfg);

/// {alert, target_class, detector_class, mode, latency_s, explanation_paths}
/// plus an "explanation" block with the tables that were produced.
nlohmann::json verdict_to_json(const Verdict& v, const ClassRegistry* classes = nullptr);

/// Writes the overlay raster (if any) as <dir>/<stem>_matches.png and records
/// the path in the verdict.
void write_explanation(Verdict& v, const std::filesystem::path& dir, const std::string& stem);

}  // namespace xdetect
