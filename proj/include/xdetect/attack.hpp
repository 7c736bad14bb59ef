#pragma once

#include <filesystem>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "xdetect/core.hpp"
#include "xdetect/extraction.hpp"
#include "xdetect/models.hpp"
#include "xdetect/oed.hpp"
#include "xdetect/sift.hpp"
#include "xdetect/spd.hpp"

namespace xdetect {

class Patch {
 public:
  Patch() = default;
  /// Square, side >= 8.
  explicit Patch(Image image);
  static Patch filled(int side, int channels, double value);
  static Patch random(int side, int channels, std::uint64_t seed);

  const Image& image() const { return image_; }
  int side() const { return image_.width(); }

 private:
  Image image_;
};

struct PlacementSpec {
  double anchor_x = 0.5;  // patch center, relative to the bbox
  double anchor_y = 0.5;
  std::optional<double> scale;  // rendered side as a fraction of the bbox's shorter side; nullopt = native size
  double rotation_min = -20.0;  // degrees
  double rotation_max = 20.0;
  double brightness_min = 0.8;
  double brightness_max = 1.6;
};

void validate_placement(const PlacementSpec& p);
void to_json(nlohmann::json& j, const PlacementSpec& p);
void from_json(const nlohmann::json& j, PlacementSpec& p);

struct PlacementDraw {
  double rotation_deg = 0.0;
  double brightness = 1.0;
};

PlacementDraw sample_placement(const PlacementSpec& p, std::mt19937_64& rng);

struct PatchComposite {
  Image image;
  /// Per scene pixel, the patch pixel index it shows, or -1.
  std::vector<int> source;
  double brightness = 1.0;
};

/// Nearest-neighbour compositing: with zero rotation and native size the
/// patch pixels land verbatim at an integer rectangle centred on the anchor.
/// The scene is promoted to RGB when the patch is RGB.
PatchComposite composite_patch(const Image& scene, const Patch& patch, const BBox& bbox, const PlacementSpec& placement,
                               const PlacementDraw& draw);

Image apply_patch(const Image& scene, const Patch& patch, const BBox& bbox, const PlacementSpec& placement,
                  const PlacementDraw& draw);
/// Draws rotation and brightness from `rng` first.
Image apply_patch(const Image& scene, const Patch& patch, const BBox& bbox, const PlacementSpec& placement,
                  std::mt19937_64& rng);

/// d loss / d patch from d loss / d composite.
Raster patch_gradient(const PatchComposite& comp, const Patch& patch, const Raster& scene_grad);

/// clip(P - epsilon * sign(g)); sign(0) = 0.
Patch lk_update(const Patch& patch, const Raster& grad, double epsilon);

/// Differentiable objective over the patch pixels.
class PatchObjective {
 public:
  virtual ~PatchObjective() = default;
  virtual double value(const Patch& patch) const = 0;
  virtual Raster gradient(const Patch& patch) const = 0;
};

Patch lk_patch_step(const Patch& patch, const PatchObjective& objective, double epsilon);

struct AttackScene {
  Image image;
  BBox bbox;
};

struct EotSample {
  std::size_t scene_index = 0;
  PlacementDraw draw;
  std::optional<TransformSpec> sp;

  std::string describe() const;
};

struct EotEvaluation {
  double loss = 0.0;         // mean cross-entropy
  double target_prob = 0.0;  // mean exp(-loss) per sample
  Raster gradient;           // patch-shaped mean gradient
};

/// Mean cross-entropy toward `target` over the given samples, with gradients
/// pulled back through the sp transform and the compositing.
EotEvaluation evaluate_eot(const Patch& patch, const std::vector<AttackScene>& scenes, const TargetModel& model,
                           ClassId target, const PlacementSpec& placement, const std::vector<EotSample>& samples,
                           int jobs = 1);

/// Draws `count` samples; when `sp` is non-empty each sample also picks one
/// of its transforms (noise gets a per-sample frozen seed).
std::vector<EotSample> draw_eot_samples(std::size_t n_scenes, const PlacementSpec& placement,
                                        const std::vector<TransformSpec>& sp, int count, std::mt19937_64& rng);

Patch lk_patch_step(const Patch& patch, const std::vector<AttackScene>& scenes, const TargetModel& model,
                    ClassId target, const PlacementSpec& placement, double epsilon, std::uint64_t seed,
                    int eot_samples = 8);

enum class AdaptiveMode { none, oe_sift, scene_processing, ensemble };
std::string to_string(AdaptiveMode m);
AdaptiveMode parse_adaptive_mode(const std::string& s);

struct AttackConfig {
  double epsilon = 0.02;
  int iterations = 50;
  std::uint64_t seed = 0;
  int eot_samples = 8;
  AdaptiveMode adaptive_mode = AdaptiveMode::none;
  std::vector<TransformSpec> sp_transforms;
  double lambda_oe = 0.0;
  int zo_samples = 4;
  double zo_step = 0.05;
  ClassId target_class = 0;
  int patch_side = 120;
  double patch_init = 0.5;  // negative: uniform random init from the seed
  PlacementSpec placement;
  int jobs = 1;
};

/// Throws ConfigError on invalid or missing mode-specific fields.
void validate_attack_config(const AttackConfig& c);
void to_json(nlohmann::json& j, const AttackConfig& c);
void from_json(const nlohmann::json& j, AttackConfig& c);
/// BLAKE2b-256 hex of the canonical JSON of the config.
std::string config_hash(const AttackConfig& c);

/// Scene-processing transforms used inside adaptive crafting. `relaxed`
/// lowers blur to 1 and noise to 0.25.
std::vector<TransformSpec> adaptive_sp_transforms(Space space, bool relaxed, std::uint64_t seed = 0);

struct OePenalty {
  double value = 0.0;  // in [-1, 0]
  bool extraction_failed = false;
  std::size_t matches = 0;
};

/// -min(1, matches / prototype descriptor count) between the extracted object
/// and the target prototype.
OePenalty oe_sift_penalty(const Image& scene_with_patch, const BBox& bbox, const ExtractorSpec& extractor,
                          const PrototypeEntry& target_prototype, const sift::SiftParams& sift);

struct OeContext {
  const PrototypeEntry* target_prototype = nullptr;
  ExtractorSpec extractor;
  sift::SiftParams sift;
};

struct TraceRow {
  int iteration = 0;
  double loss = 0.0;
  double target_prob = 0.0;
  double oe_penalty = 0.0;
  std::string eot_samples;
};

struct CraftResult {
  Patch patch;
  std::vector<TraceRow> trace;
  bool diverged = false;
  std::string error;
  double final_loss() const { return trace.empty() ? 0.0 : trace.back().loss; }
};

/// Iterated LK steps. Row i of the trace is measured before update i; a
/// final row after the last update uses fresh samples.
CraftResult craft_patch(const AttackConfig& config, const std::vector<AttackScene>& scenes, const TargetModel& model,
                        const OeContext* oe = nullptr);

std::string trace_to_csv(const std::vector<TraceRow>& trace);

/// Writes <stem>.png, <stem>.json sidecar {side, config_hash, seed, final_loss}
/// and <stem>_trace.csv.
void save_patch(const CraftResult& result, const AttackConfig& config, const std::filesystem::path& dir,
                const std::string& stem);
Patch load_patch(const std::filesystem::path& png);

/// Object still detected, IoU with the benign box >= iou_min, and the
/// attacked class in `targets`.
bool attack_success(const ModelOutput& benign, const std::optional<ModelOutput>& attacked,
                    const std::set<ClassId>& targets, double iou_min = 0.5);

}  // namespace xdetect
