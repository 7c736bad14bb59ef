#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xdetect/core.hpp"

namespace xdetect {

class CapabilityError : public Error {
 public:
  using Error::Error;
};
class PredictionError : public Error {
 public:
  using Error::Error;
};

struct TargetModelSpec {
  std::string name;
  ClassRegistry classes;
  bool has_distribution = false;
  bool has_gradient = false;
};

/// Cross-entropy toward `target_class`.
struct LossSpec {
  ClassId target_class = 0;
};

/// Black-box object detector returning the scene's main object.
///
/// Wiring a remote detector means implementing predict() over the service:
/// request = raster, response = ModelOutput JSON (see model_output_to_json).
class TargetModel {
 public:
  virtual ~TargetModel() = default;
  virtual const TargetModelSpec& spec() const = 0;
  /// nullopt when no object is detected. Never mutates the scene.
  virtual std::optional<ModelOutput> predict(const Image& scene) const = 0;
  /// Scalar loss; requires has_gradient.
  virtual double loss(const Image& scene, const LossSpec& loss) const;
  /// d loss / d pixel, same shape as the scene; requires has_gradient.
  virtual Raster gradient(const Image& scene, const LossSpec& loss) const;
};

/// Confidence on class_id, the rest spread uniformly over the other classes.
ClassDistribution lift_to_distribution(const ModelOutput& output, std::size_t n_classes);

nlohmann::json model_output_to_json(const ModelOutput& out);
ModelOutput model_output_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Mock marker model: segments the object against the background, names it by
// dominant hue (optionally gated by elongation), and announces `hijack_class`
// whenever the marker template is found on the object.

struct HueRule {
  ClassId class_id = 0;
  double hue_deg = 0;
  double max_hue_distance = 30;  // degrees
  double min_elongation = 0;     // ratio of principal axes
  double max_elongation = 1e9;
};

/// Chroma-only stripe template: the luminance stays constant so SIFT finds
/// almost nothing on it, while any blur, sharpen, darkening or noise moves
/// the pixels far from the template.
struct MarkerSpec {
  int side = 20;
  double period = 6.0;     // stripe period, pixels
  double amplitude = 0.4;  // red-channel swing
  double base = 0.55;
};

Image make_marker(const MarkerSpec& spec);

struct MockMarkerModelConfig {
  std::vector<std::string> classes;
  std::vector<HueRule> rules;
  double hue_temperature = 6.0;        // degrees
  double foreground_threshold = 0.15;
  MarkerSpec marker;
  ClassId hijack_class = 0;
  double marker_detect_threshold = 0.02;  // mean abs difference to the template
  double hijack_confidence = 0.9;
  /// Smallest box-blur width that destroys the marker.
  static constexpr int kDisruptionKernel = 3;
};

void to_json(nlohmann::json& j, const MockMarkerModelConfig& c);
void from_json(const nlohmann::json& j, MockMarkerModelConfig& c);

class MockMarkerModel final : public TargetModel {
 public:
  explicit MockMarkerModel(MockMarkerModelConfig config);
  const TargetModelSpec& spec() const override { return spec_; }
  std::optional<ModelOutput> predict(const Image& scene) const override;

  const MockMarkerModelConfig& config() const { return config_; }
  /// Top-left corner of the first template match inside `region`.
  std::optional<std::pair<int, int>> find_marker(const Image& scene, const BBox& region) const;

 private:
  MockMarkerModelConfig config_;
  TargetModelSpec spec_;
  Image marker_;
};

// ---------------------------------------------------------------------------
// Toy differentiable classifier: block-averaged 16x16 grayscale features,
// linear layer, softmax. Reports the whole frame as the object's bbox.

struct ToyModelConfig {
  std::vector<std::string> classes;
  int grid = 16;
  std::vector<double> weights;  // classes x grid*grid, row-major
  std::vector<double> bias;     // classes
};

/// Seeded Gaussian weights (stddev `scale`), zero bias.
ToyModelConfig random_toy_config(std::vector<std::string> classes, std::uint64_t seed, double scale = 1.0);

void to_json(nlohmann::json& j, const ToyModelConfig& c);
void from_json(const nlohmann::json& j, ToyModelConfig& c);

class ToyDifferentiableModel final : public TargetModel {
 public:
  explicit ToyDifferentiableModel(ToyModelConfig config);
  const TargetModelSpec& spec() const override { return spec_; }
  std::optional<ModelOutput> predict(const Image& scene) const override;
  double loss(const Image& scene, const LossSpec& loss) const override;
  Raster gradient(const Image& scene, const LossSpec& loss) const override;

  std::vector<double> probabilities(const Image& scene) const;

 private:
  std::vector<double> features(const Image& scene) const;
  std::vector<double> logits(const std::vector<double>& feats) const;
  void check_scene(const Image& scene) const;

  ToyModelConfig config_;
  TargetModelSpec spec_;
};

/// Builds a model from a JSON document with "type": "mock_marker" | "toy".
std::unique_ptr<TargetModel> load_model(const std::filesystem::path& path);
std::unique_ptr<TargetModel> model_from_json(const nlohmann::json& j);

}  // namespace xdetect
