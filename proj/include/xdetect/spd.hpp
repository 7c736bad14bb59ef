#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xdetect/core.hpp"
#include "xdetect/models.hpp"

namespace xdetect {

enum class TransformKind { blur, sharpen, noise, darken, style_hook, identity };

std::string to_string(TransformKind k);
TransformKind parse_transform_kind(const std::string& s);

/// Strength per kind:
///   blur      box kernel width in [1,255], rounded up to odd
///   sharpen   unsharp amount in (0,10], gaussian sigma 1
///   noise     uniform amplitude in [0,1], seed required
///   darken    multiplicative (1 - strength), strength in [0,1)
///   style_hook, identity: ignored
struct TransformSpec {
  TransformKind kind = TransformKind::identity;
  double strength = 0.0;
  std::optional<std::uint64_t> seed;

  friend bool operator==(const TransformSpec&, const TransformSpec&) = default;
};

void validate_transform(const TransformSpec& spec);
void to_json(nlohmann::json& j, const TransformSpec& spec);
void from_json(const nlohmann::json& j, TransformSpec& spec);
std::string describe(const TransformSpec& spec);

/// Nonempty, no duplicate specs.
class TransformSet {
 public:
  TransformSet() = default;
  explicit TransformSet(std::vector<TransformSpec> specs);
  const std::vector<TransformSpec>& specs() const { return specs_; }
  std::size_t size() const { return specs_.size(); }
  bool empty() const { return specs_.empty(); }

 private:
  std::vector<TransformSpec> specs_;
};

void to_json(nlohmann::json& j, const TransformSet& set);
void from_json(const nlohmann::json& j, TransformSet& set);

enum class Space { digital, physical };
std::string to_string(Space s);
Space parse_space(const std::string& s);

// Style transfer backend: (content, style) -> stylized image of the same dims.
// The scene is passed as both arguments.
using StyleBackend = std::function<Image(const Image& content, const Image& style)>;
void set_style_backend(StyleBackend backend);
void clear_style_backend();
bool has_style_backend();

Image apply_transform(const Image& image, const TransformSpec& spec);

/// Vector-Jacobian product of apply_transform at `input`. Supported for blur,
/// sharpen, noise (fixed seed), darken and identity; gradients are zeroed
/// where the forward pass clipped.
Raster transform_vjp(const Image& input, const TransformSpec& spec, const Raster& upstream);
bool transform_differentiable(TransformKind kind);

/// digital: blur 6, sharpen, darken 0.1, style
/// physical: blur 12, sharpen, noise 0.35, darken 0.1, style
/// style_hook becomes identity when no backend is registered.
TransformSet default_transform_set(Space space, std::uint64_t noise_seed = 0);

struct TransformOutcome {
  TransformSpec spec;
  std::optional<ClassId> class_id;  // nullopt: no detection
  double confidence = 0.0;
};

struct SpdResult {
  std::optional<ClassId> class_id;            // nullopt: inconclusive
  std::optional<ClassDistribution> aggregated;  // normalized sum
  std::vector<TransformOutcome> table;

  bool inconclusive() const { return !class_id.has_value(); }
};

/// Sums per-class distributions over already computed per-transform model
/// outputs (lifting class+confidence outputs when needed) and takes the argmax.
SpdResult aggregate_transform_outputs(const std::vector<TransformSpec>& specs,
                                      const std::vector<std::optional<ModelOutput>>& outputs,
                                      std::size_t n_classes);

SpdResult spd_classify(const Image& scene, const TargetModel& model, const TransformSet& transforms, int jobs = 1);

}  // namespace xdetect
