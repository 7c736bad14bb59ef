#include "xdetect/spd.hpp"

#include <cmath>
#include <fmt/core.h>
#include <mutex>
#include <random>

#include "xdetect/imaging.hpp"
#include "xdetect/log.hpp"
#include "xdetect/parallel.hpp"

namespace xdetect {

namespace {

constexpr double kSharpenSigma = 1.0;

std::mutex& style_mutex() {
  static std::mutex mu;
  return mu;
}

StyleBackend& style_slot() {
  static StyleBackend backend;
  return backend;
}

int odd_kernel(double strength) {
  int k = static_cast<int>(std::ceil(strength));
  if (k % 2 == 0) ++k;
  return k;
}

std::vector<double> noise_field(std::size_t n, double amplitude, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  std::vector<double> out(n);
  for (double& v : out) v = u(rng);
  return out;
}

}  // namespace

std::string to_string(TransformKind k) {
  switch (k) {
    case TransformKind::blur: return "blur";
    case TransformKind::sharpen: return "sharpen";
    case TransformKind::noise: return "noise";
    case TransformKind::darken: return "darken";
    case TransformKind::style_hook: return "style_hook";
    case TransformKind::identity: return "identity";
  }
  return "?";
}

TransformKind parse_transform_kind(const std::string& s) {
  for (auto k : {TransformKind::blur, TransformKind::sharpen, TransformKind::noise, TransformKind::darken,
                 TransformKind::style_hook, TransformKind::identity}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError(fmt::format("unknown transform kind '{}'", s));
}

void validate_transform(const TransformSpec& spec) {
  const double s = spec.strength;
  switch (spec.kind) {
    case TransformKind::blur:
      if (!(s >= 1.0 && s <= 255.0)) throw ConfigError(fmt::format("blur strength {} outside [1,255]", s));
      break;
    case TransformKind::sharpen:
      if (!(s > 0.0 && s <= 10.0)) throw ConfigError(fmt::format("sharpen strength {} outside (0,10]", s));
      break;
    case TransformKind::noise:
      if (!(s >= 0.0 && s <= 1.0)) throw ConfigError(fmt::format("noise strength {} outside [0,1]", s));
      if (!spec.seed) throw ConfigError("noise transform requires a seed");
      break;
    case TransformKind::darken:
      if (!(s >= 0.0 && s < 1.0)) throw ConfigError(fmt::format("darken strength {} outside [0,1)", s));
      break;
    case TransformKind::style_hook:
    case TransformKind::identity:
      break;
  }
}

void to_json(nlohmann::json& j, const TransformSpec& spec) {
  j = nlohmann::json{{"kind", to_string(spec.kind)}, {"strength", spec.strength}};
  if (spec.seed) j["seed"] = *spec.seed;
}

void from_json(const nlohmann::json& j, TransformSpec& spec) {
  spec = TransformSpec{};
  spec.kind = parse_transform_kind(j.at("kind").get<std::string>());
  spec.strength = j.value("strength", 0.0);
  if (j.contains("seed") && !j["seed"].is_null()) spec.seed = j["seed"].get<std::uint64_t>();
  validate_transform(spec);
}

std::string describe(const TransformSpec& spec) {
  switch (spec.kind) {
    case TransformKind::style_hook:
    case TransformKind::identity:
      return to_string(spec.kind);
    case TransformKind::noise:
      return fmt::format("noise({:g} seed={})", spec.strength, spec.seed.value_or(0));
    default:
      return fmt::format("{}({:g})", to_string(spec.kind), spec.strength);
  }
}

TransformSet::TransformSet(std::vector<TransformSpec> specs) : specs_(std::move(specs)) {
  if (specs_.empty()) throw ConfigError("transform set must not be empty");
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    validate_transform(specs_[i]);
    for (std::size_t j = 0; j < i; ++j) {
      if (specs_[i] == specs_[j]) throw ConfigError(fmt::format("duplicate transform {}", describe(specs_[i])));
    }
  }
}

void to_json(nlohmann::json& j, const TransformSet& set) { j = set.specs(); }

void from_json(const nlohmann::json& j, TransformSet& set) {
  set = TransformSet(j.get<std::vector<TransformSpec>>());
}

std::string to_string(Space s) { return s == Space::digital ? "digital" : "physical"; }

Space parse_space(const std::string& s) {
  if (s == "digital") return Space::digital;
  if (s == "physical") return Space::physical;
  throw ConfigError(fmt::format("unknown space '{}' (digital|physical)", s));
}

void set_style_backend(StyleBackend backend) {
  std::lock_guard lock(style_mutex());
  style_slot() = std::move(backend);
}

void clear_style_backend() {
  std::lock_guard lock(style_mutex());
  style_slot() = nullptr;
}

bool has_style_backend() {
  std::lock_guard lock(style_mutex());
  return static_cast<bool>(style_slot());
}

Image apply_transform(const Image& image, const TransformSpec& spec) {
  validate_transform(spec);
  switch (spec.kind) {
    case TransformKind::blur:
      return box_blur(image, odd_kernel(spec.strength));
    case TransformKind::sharpen:
      return unsharp_mask(image, kSharpenSigma, spec.strength);
    case TransformKind::noise: {
      const auto n = noise_field(image.size(), spec.strength, *spec.seed);
      std::vector<double> out(image.data().begin(), image.data().end());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += n[i];
      return Image::clipped(image.height(), image.width(), image.channels(), std::move(out));
    }
    case TransformKind::darken:
      return scale_intensity(image, 1.0 - spec.strength);
    case TransformKind::style_hook: {
      StyleBackend backend;
      {
        std::lock_guard lock(style_mutex());
        backend = style_slot();
      }
      if (!backend) throw ConfigError("style_hook transform selected but no style backend is registered");
      Image out = backend(image, image);
      if (out.height() != image.height() || out.width() != image.width()) {
        throw DimensionError("style backend changed the image dimensions");
      }
      return out.channels() == image.channels() ? out : (image.channels() == 3 ? out.to_rgb() : out.to_gray());
    }
    case TransformKind::identity:
      return image;
  }
  throw ConfigError("unknown transform kind");
}

bool transform_differentiable(TransformKind kind) {
  return kind != TransformKind::style_hook;
}

Raster transform_vjp(const Image& input, const TransformSpec& spec, const Raster& upstream) {
  validate_transform(spec);
  if (upstream.height != input.height() || upstream.width != input.width() || upstream.channels != input.channels()) {
    throw DimensionError("upstream gradient shape differs from the transform input");
  }
  switch (spec.kind) {
    case TransformKind::blur:
      return box_blur_adjoint(upstream, odd_kernel(spec.strength));
    case TransformKind::sharpen: {
      const Image blurred = gaussian_blur(input, kSharpenSigma);
      Raster masked = upstream;
      const auto x = input.data();
      const auto b = blurred.data();
      for (std::size_t i = 0; i < masked.data.size(); ++i) {
        const double raw = x[i] + spec.strength * (x[i] - b[i]);
        if (raw <= 0.0 || raw >= 1.0) masked.data[i] = 0.0;
      }
      return unsharp_mask_adjoint(masked, kSharpenSigma, spec.strength);
    }
    case TransformKind::noise: {
      const auto n = noise_field(input.size(), spec.strength, *spec.seed);
      Raster out = upstream;
      const auto x = input.data();
      for (std::size_t i = 0; i < out.data.size(); ++i) {
        const double raw = x[i] + n[i];
        if (raw <= 0.0 || raw >= 1.0) out.data[i] = 0.0;
      }
      return out;
    }
    case TransformKind::darken: {
      Raster out = upstream;
      for (double& v : out.data) v *= 1.0 - spec.strength;
      return out;
    }
    case TransformKind::identity:
      return upstream;
    case TransformKind::style_hook:
      break;
  }
  throw CapabilityError(fmt::format("transform {} has no gradient", describe(spec)));
}

TransformSet default_transform_set(Space space, std::uint64_t noise_seed) {
  std::vector<TransformSpec> specs;
  specs.push_back({TransformKind::blur, space == Space::digital ? 6.0 : 12.0, std::nullopt});
  specs.push_back({TransformKind::sharpen, 1.0, std::nullopt});
  if (space == Space::physical) specs.push_back({TransformKind::noise, 0.35, noise_seed});
  specs.push_back({TransformKind::darken, 0.1, std::nullopt});
  if (has_style_backend()) {
    specs.push_back({TransformKind::style_hook, 0.0, std::nullopt});
  } else {
    logger().warn("no style backend registered; style transfer slot runs as identity");
    specs.push_back({TransformKind::identity, 0.0, std::nullopt});
  }
  return TransformSet(std::move(specs));
}

SpdResult aggregate_transform_outputs(const std::vector<TransformSpec>& specs,
                                      const std::vector<std::optional<ModelOutput>>& outputs,
                                      std::size_t n_classes) {
  if (specs.size() != outputs.size()) throw DimensionError("one model output per transform expected");
  SpdResult result;
  std::vector<double> sum(n_classes, 0.0);
  bool any = false;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    TransformOutcome row{specs[i], std::nullopt, 0.0};
    if (outputs[i]) {
      const ModelOutput& out = *outputs[i];
      const ClassDistribution dist = out.distribution ? *out.distribution : lift_to_distribution(out, n_classes);
      if (dist.size() != n_classes) throw DimensionError("model distribution size differs from its registry");
      for (std::size_t c = 0; c < n_classes; ++c) sum[c] += dist[c];
      row.class_id = out.class_id;
      row.confidence = out.confidence;
      any = true;
    } else {
      logger().info("SPD: no detection under {}", describe(specs[i]));
    }
    result.table.push_back(row);
  }
  if (!any) return result;
  ClassDistribution total(std::move(sum));
  if (!(total.sum() > 0.0)) return result;
  result.class_id = total.argmax();
  result.aggregated = total.normalized();
  return result;
}

SpdResult spd_classify(const Image& scene, const TargetModel& model, const TransformSet& transforms, int jobs) {
  if (transforms.empty()) throw ConfigError("transform set must not be empty");
  const auto& specs = transforms.specs();
  std::vector<std::optional<ModelOutput>> outputs(specs.size());
  parallel_for(specs.size(), jobs, [&](std::size_t i) { outputs[i] = model.predict(apply_transform(scene, specs[i])); });
  return aggregate_transform_outputs(specs, outputs, model.spec().classes.size());
}

}  // namespace xdetect
