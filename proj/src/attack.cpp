#include "xdetect/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/core.h>
#include <fstream>
#include <numbers>
#include <sodium.h>

#include "xdetect/imaging.hpp"
#include "xdetect/log.hpp"
#include "xdetect/parallel.hpp"

namespace xdetect {

Patch::Patch(Image image) : image_(std::move(image)) {
  if (image_.width() != image_.height()) {
    throw ValidationError(fmt::format("patch must be square, got {}x{}", image_.width(), image_.height()));
  }
  if (image_.width() < 8) throw ValidationError(fmt::format("patch side {} below the minimum of 8", image_.width()));
}

Patch Patch::filled(int side, int channels, double value) { return Patch(Image(side, side, channels, value)); }

Patch Patch::random(int side, int channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> px(static_cast<std::size_t>(side) * side * channels);
  for (double& v : px) v = u(rng);
  return Patch(Image(side, side, channels, std::move(px)));
}

void validate_placement(const PlacementSpec& p) {
  if (!(p.anchor_x >= 0.0 && p.anchor_x <= 1.0 && p.anchor_y >= 0.0 && p.anchor_y <= 1.0)) {
    throw ConfigError("placement anchor must lie in [0,1]^2");
  }
  if (p.scale && !(*p.scale > 0.0 && *p.scale <= 1.0)) throw ConfigError("placement scale must lie in (0,1]");
  if (!(p.rotation_min <= p.rotation_max)) throw ConfigError("placement rotation range is empty");
  if (!(p.brightness_min >= 0.5 && p.brightness_max <= 2.0 && p.brightness_min <= p.brightness_max)) {
    throw ConfigError("placement brightness range must lie within [0.5,2.0]");
  }
}

void to_json(nlohmann::json& j, const PlacementSpec& p) {
  j = nlohmann::json{{"anchor", {p.anchor_x, p.anchor_y}},
                     {"scale", p.scale ? nlohmann::json(*p.scale) : nlohmann::json(nullptr)},
                     {"rotation", {p.rotation_min, p.rotation_max}},
                     {"brightness", {p.brightness_min, p.brightness_max}}};
}

void from_json(const nlohmann::json& j, PlacementSpec& p) {
  p = PlacementSpec{};
  if (j.contains("anchor")) {
    p.anchor_x = j["anchor"].at(0).get<double>();
    p.anchor_y = j["anchor"].at(1).get<double>();
  }
  if (j.contains("scale") && !j["scale"].is_null()) p.scale = j["scale"].get<double>();
  if (j.contains("rotation")) {
    p.rotation_min = j["rotation"].at(0).get<double>();
    p.rotation_max = j["rotation"].at(1).get<double>();
  }
  if (j.contains("brightness")) {
    p.brightness_min = j["brightness"].at(0).get<double>();
    p.brightness_max = j["brightness"].at(1).get<double>();
  }
  validate_placement(p);
}

PlacementDraw sample_placement(const PlacementSpec& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> rot(p.rotation_min, p.rotation_max);
  std::uniform_real_distribution<double> bri(p.brightness_min, p.brightness_max);
  PlacementDraw d;
  d.rotation_deg = rot(rng);
  d.brightness = bri(rng);
  return d;
}

PatchComposite composite_patch(const Image& scene, const Patch& patch, const BBox& bbox, const PlacementSpec& placement,
                               const PlacementDraw& draw) {
  validate_bbox(bbox, ImageDims{scene.width(), scene.height()});
  const Image base = patch.image().channels() == 3 ? scene.to_rgb() : scene;
  const int h = base.height(), w = base.width(), ch = base.channels();
  const int pc = patch.image().channels();
  const int side = patch.side();
  const double short_side = std::min(bbox.width(), bbox.height());
  double s = placement.scale ? std::round(*placement.scale * short_side) : static_cast<double>(side);
  if (s > short_side) {
    logger().warn("patch of {} px exceeds the {:.0f} px bbox; scaling it down", s, short_side);
    s = std::floor(short_side);
  }
  s = std::max(1.0, s);
  const double cx = bbox.x1 + placement.anchor_x * bbox.width();
  const double cy = bbox.y1 + placement.anchor_y * bbox.height();
  const long tlx = std::lround(cx - 0.5 * s);
  const long tly = std::lround(cy - 0.5 * s);
  const double theta = draw.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double half = 0.5 * s;
  const double reach = half * std::numbers::sqrt2 + 1.0;
  const double mid_x = tlx + half, mid_y = tly + half;

  PatchComposite out;
  out.brightness = draw.brightness;
  out.source.assign(static_cast<std::size_t>(h) * w, -1);
  std::vector<double> px(base.data().begin(), base.data().end());
  const int x_lo = std::max(0, static_cast<int>(std::floor(mid_x - reach)));
  const int x_hi = std::min(w - 1, static_cast<int>(std::ceil(mid_x + reach)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(mid_y - reach)));
  const int y_hi = std::min(h - 1, static_cast<int>(std::ceil(mid_y + reach)));
  const auto pd = patch.image().data();
  for (int y = y_lo; y <= y_hi; ++y) {
    for (int x = x_lo; x <= x_hi; ++x) {
      const double dx = x + 0.5 - mid_x, dy = y + 0.5 - mid_y;
      const double u = cs * dx - sn * dy + half;
      const double v = sn * dx + cs * dy + half;
      const int pu = static_cast<int>(std::floor(u * side / s));
      const int pv = static_cast<int>(std::floor(v * side / s));
      if (u < 0 || v < 0 || pu < 0 || pv < 0 || pu >= side || pv >= side) continue;
      const int src = pv * side + pu;
      out.source[static_cast<std::size_t>(y) * w + x] = src;
      for (int c = 0; c < ch; ++c) {
        const double val = pd[static_cast<std::size_t>(src) * pc + (pc == 1 ? 0 : c)] * draw.brightness;
        px[(static_cast<std::size_t>(y) * w + x) * ch + c] = std::clamp(val, 0.0, 1.0);
      }
    }
  }
  out.image = Image(h, w, ch, std::move(px));
  return out;
}

Image apply_patch(const Image& scene, const Patch& patch, const BBox& bbox, const PlacementSpec& placement,
                  const PlacementDraw& draw) {
  return composite_patch(scene, patch, bbox, placement, draw).image;
}

Image apply_patch(const Image& scene, const Patch& patch, const BBox& bbox, const PlacementSpec& placement,
                  std::mt19937_64& rng) {
  validate_placement(placement);
  return apply_patch(scene, patch, bbox, placement, sample_placement(placement, rng));
}

Raster patch_gradient(const PatchComposite& comp, const Patch& patch, const Raster& scene_grad) {
  const int h = comp.image.height(), w = comp.image.width(), ch = comp.image.channels();
  if (scene_grad.height != h || scene_grad.width != w || scene_grad.channels != ch) {
    throw DimensionError("scene gradient shape differs from the composite");
  }
  const int pc = patch.image().channels();
  const int side = patch.side();
  const auto pd = patch.image().data();
  Raster g(side, side, pc, 0.0);
  for (std::size_t i = 0; i < comp.source.size(); ++i) {
    const int src = comp.source[i];
    if (src < 0) continue;
    for (int c = 0; c < ch; ++c) {
      const int pch = pc == 1 ? 0 : c;
      const std::size_t pi = static_cast<std::size_t>(src) * pc + pch;
      const double raw = pd[pi] * comp.brightness;
      if (raw < 0.0 || raw > 1.0) continue;
      g.data[pi] += scene_grad.data[i * ch + c] * comp.brightness;
    }
  }
  return g;
}

Patch lk_update(const Patch& patch, const Raster& grad, double epsilon) {
  const Image& img = patch.image();
  if (grad.height != img.height() || grad.width != img.width() || grad.channels != img.channels()) {
    throw DimensionError("gradient shape differs from the patch");
  }
  std::vector<double> px(img.data().begin(), img.data().end());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double g = grad.data[i];
    const double sign = g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0);
    px[i] = std::clamp(px[i] - epsilon * sign, 0.0, 1.0);
  }
  return Patch(Image(img.height(), img.width(), img.channels(), std::move(px)));
}

Patch lk_patch_step(const Patch& patch, const PatchObjective& objective, double epsilon) {
  return lk_update(patch, objective.gradient(patch), epsilon);
}

std::string EotSample::describe() const {
  std::string s = fmt::format("s{}/r{:.6f}/b{:.6f}", scene_index, draw.rotation_deg, draw.brightness);
  if (sp) s += "/" + xdetect::describe(*sp);
  return s;
}

std::vector<EotSample> draw_eot_samples(std::size_t n_scenes, const PlacementSpec& placement,
                                        const std::vector<TransformSpec>& sp, int count, std::mt19937_64& rng) {
  if (n_scenes == 0) throw ValidationError("EOT needs at least one scene");
  std::vector<EotSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    EotSample s;
    s.scene_index = std::uniform_int_distribution<std::size_t>(0, n_scenes - 1)(rng);
    s.draw = sample_placement(placement, rng);
    if (!sp.empty()) {
      TransformSpec t = sp[std::uniform_int_distribution<std::size_t>(0, sp.size() - 1)(rng)];
      if (t.kind == TransformKind::noise) t.seed = rng();
      s.sp = t;
    }
    out.push_back(s);
  }
  return out;
}

EotEvaluation evaluate_eot(const Patch& patch, const std::vector<AttackScene>& scenes, const TargetModel& model,
                           ClassId target, const PlacementSpec& placement, const std::vector<EotSample>& samples,
                           int jobs) {
  if (!model.spec().has_gradient) {
    throw CapabilityError(fmt::format("model '{}' exposes no gradient; patch crafting needs one", model.spec().name));
  }
  if (samples.empty()) throw ConfigError("at least one EOT sample is required");
  const LossSpec loss{target};
  std::vector<double> losses(samples.size());
  std::vector<Raster> grads(samples.size());
  parallel_for(samples.size(), jobs, [&](std::size_t i) {
    const EotSample& s = samples[i];
    const AttackScene& sc = scenes.at(s.scene_index);
    const PatchComposite comp = composite_patch(sc.image, patch, sc.bbox, placement, s.draw);
    const Image x = s.sp ? apply_transform(comp.image, *s.sp) : comp.image;
    losses[i] = model.loss(x, loss);
    Raster g = model.gradient(x, loss);
    if (s.sp) g = transform_vjp(comp.image, *s.sp, g);
    grads[i] = patch_gradient(comp, patch, g);
  });
  EotEvaluation ev;
  ev.gradient = Raster(patch.side(), patch.side(), patch.image().channels(), 0.0);
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ev.loss += losses[i] * inv;
    ev.target_prob += std::exp(-losses[i]) * inv;
    for (std::size_t k = 0; k < ev.gradient.data.size(); ++k) ev.gradient.data[k] += grads[i].data[k] * inv;
  }
  return ev;
}

Patch lk_patch_step(const Patch& patch, const std::vector<AttackScene>& scenes, const TargetModel& model,
                    ClassId target, const PlacementSpec& placement, double epsilon, std::uint64_t seed,
                    int eot_samples) {
  std::mt19937_64 rng(seed);
  const auto samples = draw_eot_samples(scenes.size(), placement, {}, eot_samples, rng);
  return lk_update(patch, evaluate_eot(patch, scenes, model, target, placement, samples).gradient, epsilon);
}

std::string to_string(AdaptiveMode m) {
  switch (m) {
    case AdaptiveMode::none: return "none";
    case AdaptiveMode::oe_sift: return "oe_sift";
    case AdaptiveMode::scene_processing: return "scene_processing";
    case AdaptiveMode::ensemble: return "ensemble";
  }
  return "?";
}

AdaptiveMode parse_adaptive_mode(const std::string& s) {
  for (auto m : {AdaptiveMode::none, AdaptiveMode::oe_sift, AdaptiveMode::scene_processing, AdaptiveMode::ensemble}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError(fmt::format("unknown adaptive mode '{}'", s));
}

namespace {

bool uses_sp(AdaptiveMode m) { return m == AdaptiveMode::scene_processing || m == AdaptiveMode::ensemble; }
bool uses_oe(AdaptiveMode m) { return m == AdaptiveMode::oe_sift || m == AdaptiveMode::ensemble; }

}  // namespace

void validate_attack_config(const AttackConfig& c) {
  if (!(c.epsilon > 0.0) || !std::isfinite(c.epsilon)) throw ConfigError("epsilon must be positive");
  if (c.iterations < 1) throw ConfigError("iterations must be at least 1");
  if (c.eot_samples < 1) throw ConfigError("eot_samples must be at least 1");
  if (c.patch_side < 8) throw ConfigError("patch_side must be at least 8");
  if (c.patch_init > 1.0) throw ConfigError("patch_init must be <= 1 (negative for random)");
  validate_placement(c.placement);
  if (uses_sp(c.adaptive_mode)) {
    if (c.sp_transforms.empty()) {
      throw ConfigError(fmt::format("adaptive mode {} needs sp_transforms", to_string(c.adaptive_mode)));
    }
    for (const auto& t : c.sp_transforms) {
      validate_transform(t);
      if (!transform_differentiable(t.kind)) {
        throw ConfigError(fmt::format("sp transform {} is not differentiable", describe(t)));
      }
    }
  }
  if (uses_oe(c.adaptive_mode)) {
    if (c.zo_samples < 1) throw ConfigError("zo_samples must be at least 1 when the oe_sift penalty is active");
    if (!(c.zo_step > 0.0)) throw ConfigError("zo_step must be positive");
    if (!(c.lambda_oe >= 0.0)) throw ConfigError("lambda_oe must be non-negative");
  }
}

void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = nlohmann::json{{"epsilon", c.epsilon},
                     {"iterations", c.iterations},
                     {"seed", c.seed},
                     {"eot_samples", c.eot_samples},
                     {"adaptive_mode", to_string(c.adaptive_mode)},
                     {"sp_transforms", c.sp_transforms},
                     {"lambda_oe", c.lambda_oe},
                     {"zo_samples", c.zo_samples},
                     {"zo_step", c.zo_step},
                     {"target_class", c.target_class},
                     {"patch_side", c.patch_side},
                     {"patch_init", c.patch_init},
                     {"placement", c.placement}};
}

void from_json(const nlohmann::json& j, AttackConfig& c) {
  c = AttackConfig{};
  c.epsilon = j.value("epsilon", c.epsilon);
  c.iterations = j.value("iterations", c.iterations);
  c.seed = j.value("seed", c.seed);
  c.eot_samples = j.value("eot_samples", c.eot_samples);
  if (j.contains("adaptive_mode")) c.adaptive_mode = parse_adaptive_mode(j["adaptive_mode"].get<std::string>());
  if (j.contains("sp_transforms")) c.sp_transforms = j["sp_transforms"].get<std::vector<TransformSpec>>();
  c.lambda_oe = j.value("lambda_oe", c.lambda_oe);
  c.zo_samples = j.value("zo_samples", c.zo_samples);
  c.zo_step = j.value("zo_step", c.zo_step);
  c.target_class = j.value("target_class", c.target_class);
  c.patch_side = j.value("patch_side", c.patch_side);
  c.patch_init = j.value("patch_init", c.patch_init);
  if (j.contains("placement")) c.placement = j["placement"].get<PlacementSpec>();
  c.jobs = j.value("jobs", c.jobs);
}

std::string config_hash(const AttackConfig& c) {
  if (sodium_init() < 0) throw Error("libsodium initialisation failed");
  const std::string text = nlohmann::json(c).dump();
  unsigned char digest[32];
  crypto_generichash(digest, sizeof digest, reinterpret_cast<const unsigned char*>(text.data()), text.size(), nullptr,
                     0);
  char hex[sizeof digest * 2 + 1];
  sodium_bin2hex(hex, sizeof hex, digest, sizeof digest);
  return hex;
}

std::vector<TransformSpec> adaptive_sp_transforms(Space space, bool relaxed, std::uint64_t seed) {
  std::vector<TransformSpec> out;
  const double blur = relaxed ? 1.0 : (space == Space::digital ? 6.0 : 12.0);
  out.push_back({TransformKind::blur, blur, std::nullopt});
  out.push_back({TransformKind::darken, 0.1, std::nullopt});
  if (space == Space::physical) out.push_back({TransformKind::noise, relaxed ? 0.25 : 0.35, seed});
  return out;
}

OePenalty oe_sift_penalty(const Image& scene_with_patch, const BBox& bbox, const ExtractorSpec& extractor,
                          const PrototypeEntry& target_prototype, const sift::SiftParams& sift) {
  if (target_prototype.descriptors.empty()) throw ValidationError("target prototype carries no descriptors");
  OePenalty p;
  Image object;
  try {
    object = extract_object_detailed(scene_with_patch, bbox, extractor).image;
  } catch (const ExtractionError& e) {
    logger().info("oe_sift penalty: {}", e.what());
    p.extraction_failed = true;
    return p;
  }
  const auto f = sift::extract_features(object, sift);
  p.matches = sift::match_descriptors(f.descriptors, target_prototype.descriptors, sift.match_ratio).count();
  p.value = -std::min(1.0, static_cast<double>(p.matches) / static_cast<double>(target_prototype.descriptors.size()));
  return p;
}

namespace {

Patch perturbed(const Patch& patch, const std::vector<double>& dir, double step) {
  const auto src = patch.image().data();
  std::vector<double> px(src.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::clamp(src[i] + step * dir[i], 0.0, 1.0);
  return Patch(Image(patch.side(), patch.side(), patch.image().channels(), std::move(px)));
}

bool finite(const Raster& r) {
  return std::all_of(r.data.begin(), r.data.end(), [](double v) { return std::isfinite(v); });
}

std::string join_samples(const std::vector<EotSample>& samples) {
  std::string out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (i) out += ';';
    out += samples[i].describe();
  }
  return out;
}

}  // namespace

CraftResult craft_patch(const AttackConfig& config, const std::vector<AttackScene>& scenes, const TargetModel& model,
                        const OeContext* oe) {
  validate_attack_config(config);
  if (scenes.empty()) throw ValidationError("craft_patch needs at least one scene");
  if (!model.spec().has_gradient) {
    throw CapabilityError(fmt::format("model '{}' exposes no gradient; patch crafting needs one", model.spec().name));
  }
  if (!model.spec().classes.contains(config.target_class)) throw ConfigError("attack target class not in the model registry");
  const bool sp_active = uses_sp(config.adaptive_mode);
  const bool oe_active = uses_oe(config.adaptive_mode) && config.lambda_oe != 0.0;
  if (oe_active && (!oe || !oe->target_prototype)) {
    throw ConfigError("oe_sift penalty needs a target prototype");
  }
  const std::vector<TransformSpec> sp = sp_active ? config.sp_transforms : std::vector<TransformSpec>{};

  CraftResult result;
  result.patch = config.patch_init < 0 ? Patch::random(config.patch_side, 3, config.seed)
                                       : Patch::filled(config.patch_side, 3, config.patch_init);
  std::mt19937_64 eot_rng(config.seed);
  std::mt19937_64 zo_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  for (int it = 0; it <= config.iterations; ++it) {
    const auto samples = draw_eot_samples(scenes.size(), config.placement, sp, config.eot_samples, eot_rng);
    EotEvaluation ev = evaluate_eot(result.patch, scenes, model, config.target_class, config.placement, samples,
                                    config.jobs);
    TraceRow row{it, ev.loss, ev.target_prob, 0.0, join_samples(samples)};
    Raster grad = std::move(ev.gradient);

    if (oe_active) {
      const AttackScene& sc = scenes[samples.front().scene_index];
      auto penalty_at = [&](const Patch& p) {
        const Image composite = apply_patch(sc.image, p, sc.bbox, config.placement, samples.front().draw);
        return oe_sift_penalty(composite, sc.bbox, oe->extractor, *oe->target_prototype, oe->sift).value;
      };
      row.oe_penalty = penalty_at(result.patch);
      row.loss += config.lambda_oe * row.oe_penalty;
      if (it < config.iterations) {
        std::vector<double> zo(grad.data.size(), 0.0);
        std::bernoulli_distribution coin(0.5);
        std::vector<double> dir(grad.data.size());
        for (int z = 0; z < config.zo_samples; ++z) {
          for (double& d : dir) d = coin(zo_rng) ? 1.0 : -1.0;
          const double fp = penalty_at(perturbed(result.patch, dir, config.zo_step));
          const double fm = penalty_at(perturbed(result.patch, dir, -config.zo_step));
          const double slope = (fp - fm) / (2.0 * config.zo_step);
          for (std::size_t i = 0; i < zo.size(); ++i) zo[i] += slope * dir[i] / config.zo_samples;
        }
        for (std::size_t i = 0; i < zo.size(); ++i) grad.data[i] += config.lambda_oe * zo[i];
      }
    }

    result.trace.push_back(row);
    if (!std::isfinite(row.loss) || !finite(grad)) {
      result.diverged = true;
      result.error = fmt::format("non-finite loss or gradient at iteration {}", it);
      logger().error("craft_patch: {}", result.error);
      return result;
    }
    if (it < config.iterations) result.patch = lk_update(result.patch, grad, config.epsilon);
  }
  return result;
}

std::string trace_to_csv(const std::vector<TraceRow>& trace) {
  std::string out = "iteration,loss,target_prob,oe_penalty,eot_samples\n";
  for (const auto& r : trace) {
    out += fmt::format("{},{:.17g},{:.17g},{:.17g},{}\n", r.iteration, r.loss, r.target_prob, r.oe_penalty,
                       r.eot_samples);
  }
  return out;
}

void save_patch(const CraftResult& result, const AttackConfig& config, const std::filesystem::path& dir,
                const std::string& stem) {
  std::filesystem::create_directories(dir);
  write_png(result.patch.image(), dir / (stem + ".png"));
  const nlohmann::json sidecar{{"side", result.patch.side()},
                               {"config_hash", config_hash(config)},
                               {"seed", config.seed},
                               {"final_loss", result.final_loss()}};
  std::ofstream js(dir / (stem + ".json"));
  js << sidecar.dump(2) << '\n';
  std::ofstream csv(dir / (stem + "_trace.csv"));
  csv << trace_to_csv(result.trace);
  if (!js || !csv) throw IoError(fmt::format("failed writing patch files under '{}'", dir.string()));
}

Patch load_patch(const std::filesystem::path& png) { return Patch(read_png(png)); }

bool attack_success(const ModelOutput& benign, const std::optional<ModelOutput>& attacked,
                    const std::set<ClassId>& targets, double iou_min) {
  if (!attacked) return false;
  if (iou(benign.bbox, attacked->bbox) < iou_min) return false;
  return targets.count(attacked->class_id) > 0;
}

}  // namespace xdetect
