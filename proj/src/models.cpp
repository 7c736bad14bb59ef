#include "xdetect/models.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/core.h>
#include <fstream>
#include <numbers>
#include <random>

#include "xdetect/imaging.hpp"
#include "xdetect/synthetic.hpp"

namespace xdetect {

double TargetModel::loss(const Image&, const LossSpec&) const {
  throw CapabilityError(fmt::format("model '{}' does not expose a loss", spec().name));
}

Raster TargetModel::gradient(const Image&, const LossSpec&) const {
  throw CapabilityError(fmt::format("model '{}' does not expose gradients", spec().name));
}

ClassDistribution lift_to_distribution(const ModelOutput& output, std::size_t n_classes) {
  if (n_classes < 2) throw ValidationError("lifting a prediction needs at least two classes");
  if (!(output.confidence >= 0.0 && output.confidence <= 1.0)) {
    throw ValidationError(fmt::format("confidence {} outside [0,1]", output.confidence));
  }
  if (output.class_id < 0 || static_cast<std::size_t>(output.class_id) >= n_classes) {
    throw ValidationError(fmt::format("class {} outside a {}-class registry", output.class_id, n_classes));
  }
  std::vector<double> mass(n_classes, (1.0 - output.confidence) / static_cast<double>(n_classes - 1));
  mass[static_cast<std::size_t>(output.class_id)] = output.confidence;
  return ClassDistribution(std::move(mass));
}

nlohmann::json model_output_to_json(const ModelOutput& out) {
  nlohmann::json j{{"bbox", {out.bbox.x1, out.bbox.y1, out.bbox.x2, out.bbox.y2}},
                   {"class_id", out.class_id},
                   {"confidence", out.confidence}};
  if (out.distribution) {
    j["distribution"] = std::vector<double>(out.distribution->mass().begin(), out.distribution->mass().end());
  }
  return j;
}

ModelOutput model_output_from_json(const nlohmann::json& j) {
  ModelOutput out;
  const auto b = j.at("bbox").get<std::vector<double>>();
  if (b.size() != 4) throw ValidationError("model output bbox needs four numbers");
  out.bbox = BBox{b[0], b[1], b[2], b[3]};
  out.class_id = j.at("class_id").get<ClassId>();
  out.confidence = j.at("confidence").get<double>();
  if (j.contains("distribution")) out.distribution = ClassDistribution(j["distribution"].get<std::vector<double>>());
  validate_model_output(out);
  return out;
}

// ---------------------------------------------------------------------------

Image make_marker(const MarkerSpec& spec) {
  if (spec.side < 4) throw ConfigError("marker side must be at least 4");
  constexpr double kGreenPerRed = 0.299 / 0.587;
  std::vector<double> data(static_cast<std::size_t>(spec.side) * spec.side * 3);
  for (int y = 0; y < spec.side; ++y) {
    for (int x = 0; x < spec.side; ++x) {
      const double s = std::sin(2.0 * std::numbers::pi * x / spec.period);
      double* px = &data[(static_cast<std::size_t>(y) * spec.side + x) * 3];
      px[0] = spec.base + spec.amplitude * s;
      px[1] = spec.base - spec.amplitude * kGreenPerRed * s;
      px[2] = spec.base;
    }
  }
  return Image(spec.side, spec.side, 3, std::move(data));
}

namespace {

ClassId class_ref(const nlohmann::json& j, const ClassRegistry& reg) {
  if (j.is_number_integer()) {
    const ClassId id = j.get<ClassId>();
    if (!reg.contains(id)) throw ConfigError(fmt::format("class id {} not in registry", id));
    return id;
  }
  const auto name = j.get<std::string>();
  const auto id = reg.find(name);
  if (!id) throw ConfigError(fmt::format("class '{}' not in registry", name));
  return *id;
}

double hue_distance(double a, double b) {
  const double d = std::fmod(std::abs(a - b), 360.0);
  return std::min(d, 360.0 - d);
}

}  // namespace

void to_json(nlohmann::json& j, const MockMarkerModelConfig& c) {
  nlohmann::json rules = nlohmann::json::array();
  for (const auto& r : c.rules) {
    rules.push_back({{"class", c.classes.at(static_cast<std::size_t>(r.class_id))},
                     {"hue_deg", r.hue_deg},
                     {"max_hue_distance", r.max_hue_distance},
                     {"min_elongation", r.min_elongation},
                     {"max_elongation", r.max_elongation}});
  }
  j = nlohmann::json{{"classes", c.classes},
                     {"rules", rules},
                     {"hue_temperature", c.hue_temperature},
                     {"foreground_threshold", c.foreground_threshold},
                     {"marker",
                      {{"side", c.marker.side},
                       {"period", c.marker.period},
                       {"amplitude", c.marker.amplitude},
                       {"base", c.marker.base}}},
                     {"hijack_class", c.classes.at(static_cast<std::size_t>(c.hijack_class))},
                     {"marker_detect_threshold", c.marker_detect_threshold},
                     {"hijack_confidence", c.hijack_confidence}};
}

void from_json(const nlohmann::json& j, MockMarkerModelConfig& c) {
  c = MockMarkerModelConfig{};
  c.classes = j.at("classes").get<std::vector<std::string>>();
  const ClassRegistry reg(c.classes);
  for (const auto& r : j.at("rules")) {
    HueRule rule;
    rule.class_id = class_ref(r.at("class"), reg);
    rule.hue_deg = r.at("hue_deg").get<double>();
    rule.max_hue_distance = r.value("max_hue_distance", rule.max_hue_distance);
    rule.min_elongation = r.value("min_elongation", rule.min_elongation);
    rule.max_elongation = r.value("max_elongation", rule.max_elongation);
    c.rules.push_back(rule);
  }
  c.hue_temperature = j.value("hue_temperature", c.hue_temperature);
  c.foreground_threshold = j.value("foreground_threshold", c.foreground_threshold);
  if (j.contains("marker")) {
    const auto& m = j["marker"];
    c.marker.side = m.value("side", c.marker.side);
    c.marker.period = m.value("period", c.marker.period);
    c.marker.amplitude = m.value("amplitude", c.marker.amplitude);
    c.marker.base = m.value("base", c.marker.base);
  }
  c.hijack_class = class_ref(j.at("hijack_class"), reg);
  c.marker_detect_threshold = j.value("marker_detect_threshold", c.marker_detect_threshold);
  c.hijack_confidence = j.value("hijack_confidence", c.hijack_confidence);
}

MockMarkerModel::MockMarkerModel(MockMarkerModelConfig config) : config_(std::move(config)) {
  spec_.name = "mock_marker";
  spec_.classes = ClassRegistry(config_.classes);
  spec_.has_distribution = true;
  spec_.has_gradient = false;
  if (!spec_.classes.contains(config_.hijack_class)) throw ConfigError("hijack class not in registry");
  for (double t : {config_.foreground_threshold, config_.marker_detect_threshold, config_.hijack_confidence}) {
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("mock model thresholds must lie in (0,1)");
  }
  if (config_.hijack_confidence <= 0.5) throw ConfigError("hijack confidence must exceed 0.5");
  if (config_.rules.empty()) throw ConfigError("mock model needs at least one hue rule");
  for (const auto& r : config_.rules) {
    if (!spec_.classes.contains(r.class_id)) throw ConfigError("hue rule refers to an unknown class");
  }
  marker_ = make_marker(config_.marker);
}

std::optional<std::pair<int, int>> MockMarkerModel::find_marker(const Image& scene, const BBox& region) const {
  const Image rgb = scene.to_rgb();
  const int side = marker_.width();
  const int x_lo = std::max(0, static_cast<int>(std::floor(region.x1)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(region.y1)));
  const int x_hi = std::min(rgb.width() - side, static_cast<int>(std::ceil(region.x2)) - side);
  const int y_hi = std::min(rgb.height() - side, static_cast<int>(std::ceil(region.y2)) - side);
  const double budget = config_.marker_detect_threshold * static_cast<double>(marker_.size());
  const auto tpl = marker_.data();
  for (int y0 = y_lo; y0 <= y_hi; ++y0) {
    for (int x0 = x_lo; x0 <= x_hi; ++x0) {
      double acc = 0.0;
      for (int y = 0; y < side && acc < budget; ++y) {
        for (int x = 0; x < side && acc < budget; ++x) {
          const double* t = &tpl[(static_cast<std::size_t>(y) * side + x) * 3];
          for (int ch = 0; ch < 3; ++ch) acc += std::abs(rgb.at(y0 + y, x0 + x, ch) - t[ch]);
        }
      }
      if (acc < budget) return std::make_pair(x0, y0);
    }
  }
  return std::nullopt;
}

std::optional<ModelOutput> MockMarkerModel::predict(const Image& scene) const {
  const Image rgb = scene.to_rgb();
  const Mask mask = segment_foreground(rgb, config_.foreground_threshold);
  const std::size_t n = mask.count();
  if (n < 50) return std::nullopt;
  const BBox bbox = *mask_bbox(mask);

  double mean[3] = {0, 0, 0};
  double mx = 0, my = 0;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      for (int ch = 0; ch < 3; ++ch) mean[ch] += rgb.at(y, x, ch);
      mx += x;
      my += y;
    }
  }
  for (double& m : mean) m /= static_cast<double>(n);
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0, syy = 0, sxy = 0;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      sxx += (x - mx) * (x - mx);
      syy += (y - my) * (y - my);
      sxy += (x - mx) * (y - my);
    }
  }
  const double tr = sxx + syy;
  const double disc = std::sqrt(std::max(0.0, (sxx - syy) * (sxx - syy) + 4 * sxy * sxy));
  const double l1 = 0.5 * (tr + disc), l2 = 0.5 * (tr - disc);
  const double elongation = l2 > 0 ? std::sqrt(l1 / l2) : 1e9;

  if (std::max({mean[0], mean[1], mean[2]}) - std::min({mean[0], mean[1], mean[2]}) < 1e-3) return std::nullopt;
  const double hue = synth::rgb_hue(mean[0], mean[1], mean[2]);

  std::vector<double> mass(spec_.classes.size(), 0.0);
  for (const auto& rule : config_.rules) {
    if (elongation < rule.min_elongation || elongation > rule.max_elongation) continue;
    const double d = hue_distance(hue, rule.hue_deg);
    if (d > rule.max_hue_distance) continue;
    const double score = std::exp(-0.5 * d * d / (config_.hue_temperature * config_.hue_temperature));
    auto& slot = mass[static_cast<std::size_t>(rule.class_id)];
    slot = std::max(slot, score);
  }
  double total = 0.0;
  for (double m : mass) total += m;
  if (!(total > 0.0)) return std::nullopt;
  ClassDistribution dist = normalize_distribution(mass);

  if (find_marker(rgb, bbox)) {
    std::vector<double> hijacked(dist.size());
    for (std::size_t i = 0; i < hijacked.size(); ++i) hijacked[i] = (1.0 - config_.hijack_confidence) * dist[i];
    hijacked[static_cast<std::size_t>(config_.hijack_class)] += config_.hijack_confidence;
    dist = ClassDistribution(std::move(hijacked));
  }
  ModelOutput out;
  out.bbox = bbox;
  out.class_id = dist.argmax();
  out.confidence = dist[static_cast<std::size_t>(out.class_id)];
  out.distribution = dist;
  return out;
}

// ---------------------------------------------------------------------------

ToyModelConfig random_toy_config(std::vector<std::string> classes, std::uint64_t seed, double scale) {
  ToyModelConfig c;
  c.classes = std::move(classes);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  c.weights.resize(c.classes.size() * static_cast<std::size_t>(c.grid * c.grid));
  for (double& w : c.weights) w = normal(rng);
  c.bias.assign(c.classes.size(), 0.0);
  return c;
}

void to_json(nlohmann::json& j, const ToyModelConfig& c) {
  j = nlohmann::json{{"classes", c.classes}, {"grid", c.grid}, {"weights", c.weights}, {"bias", c.bias}};
}

void from_json(const nlohmann::json& j, ToyModelConfig& c) {
  c = ToyModelConfig{};
  c.classes = j.at("classes").get<std::vector<std::string>>();
  c.grid = j.value("grid", c.grid);
  if (j.contains("seed")) {
    c = random_toy_config(c.classes, j["seed"].get<std::uint64_t>(), j.value("scale", 1.0));
    return;
  }
  c.weights = j.at("weights").get<std::vector<double>>();
  c.bias = j.value("bias", std::vector<double>(c.classes.size(), 0.0));
}

ToyDifferentiableModel::ToyDifferentiableModel(ToyModelConfig config) : config_(std::move(config)) {
  spec_.name = "toy";
  spec_.classes = ClassRegistry(config_.classes);
  spec_.has_distribution = true;
  spec_.has_gradient = true;
  if (config_.grid < 1) throw ConfigError("toy model grid must be positive");
  const std::size_t nf = static_cast<std::size_t>(config_.grid) * config_.grid;
  if (config_.weights.size() != config_.classes.size() * nf) {
    throw ConfigError(fmt::format("toy model expects {} weights, got {}", config_.classes.size() * nf,
                                  config_.weights.size()));
  }
  if (config_.bias.size() != config_.classes.size()) throw ConfigError("toy model bias size mismatch");
  for (double w : config_.weights) {
    if (!std::isfinite(w)) throw ConfigError("toy model weights must be finite");
  }
}

void ToyDifferentiableModel::check_scene(const Image& scene) const {
  if (scene.height() < config_.grid || scene.width() < config_.grid) {
    throw PredictionError(fmt::format("scene {}x{} smaller than the {}x{} feature grid", scene.width(),
                                      scene.height(), config_.grid, config_.grid));
  }
}

std::vector<double> ToyDifferentiableModel::features(const Image& scene) const {
  check_scene(scene);
  const int g = config_.grid, h = scene.height(), w = scene.width();
  std::vector<double> f(static_cast<std::size_t>(g) * g, 0.0);
  for (int i = 0; i < g; ++i) {
    const int y0 = i * h / g, y1 = (i + 1) * h / g;
    for (int j = 0; j < g; ++j) {
      const int x0 = j * w / g, x1 = (j + 1) * w / g;
      double acc = 0.0;
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          acc += scene.channels() == 3
                     ? 0.299 * scene.at(y, x, 0) + 0.587 * scene.at(y, x, 1) + 0.114 * scene.at(y, x, 2)
                     : scene.at(y, x, 0);
        }
      }
      f[static_cast<std::size_t>(i) * g + j] = acc / ((y1 - y0) * (x1 - x0));
    }
  }
  return f;
}

std::vector<double> ToyDifferentiableModel::logits(const std::vector<double>& feats) const {
  const std::size_t nc = config_.classes.size(), nf = feats.size();
  std::vector<double> z(nc);
  for (std::size_t c = 0; c < nc; ++c) {
    double acc = config_.bias[c];
    for (std::size_t k = 0; k < nf; ++k) acc += config_.weights[c * nf + k] * feats[k];
    z[c] = acc;
  }
  return z;
}

namespace {

std::vector<double> softmax(std::vector<double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : z) v /= sum;
  return z;
}

}  // namespace

std::vector<double> ToyDifferentiableModel::probabilities(const Image& scene) const {
  return softmax(logits(features(scene)));
}

std::optional<ModelOutput> ToyDifferentiableModel::predict(const Image& scene) const {
  auto p = probabilities(scene);
  ClassDistribution dist(std::move(p));
  ModelOutput out;
  out.bbox = BBox{0, 0, static_cast<double>(scene.width()), static_cast<double>(scene.height())};
  out.class_id = dist.argmax();
  out.confidence = dist[static_cast<std::size_t>(out.class_id)];
  out.distribution = std::move(dist);
  return out;
}

double ToyDifferentiableModel::loss(const Image& scene, const LossSpec& loss) const {
  if (!spec_.classes.contains(loss.target_class)) throw ValidationError("loss target outside registry");
  const auto z = logits(features(scene));
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - mx);
  return -(z[static_cast<std::size_t>(loss.target_class)] - mx - std::log(sum));
}

Raster ToyDifferentiableModel::gradient(const Image& scene, const LossSpec& loss) const {
  if (!spec_.classes.contains(loss.target_class)) throw ValidationError("loss target outside registry");
  const auto p = probabilities(scene);
  const std::size_t nc = p.size();
  const int g = config_.grid, h = scene.height(), w = scene.width();
  const std::size_t nf = static_cast<std::size_t>(g) * g;
  // d(-log p_t)/dz = p - onehot(t); back through the linear layer
  std::vector<double> df(nf, 0.0);
  for (std::size_t c = 0; c < nc; ++c) {
    const double dz = p[c] - (static_cast<ClassId>(c) == loss.target_class ? 1.0 : 0.0);
    for (std::size_t k = 0; k < nf; ++k) df[k] += config_.weights[c * nf + k] * dz;
  }
  Raster grad(h, w, scene.channels(), 0.0);
  constexpr double lum[3] = {0.299, 0.587, 0.114};
  for (int i = 0; i < g; ++i) {
    const int y0 = i * h / g, y1 = (i + 1) * h / g;
    for (int j = 0; j < g; ++j) {
      const int x0 = j * w / g, x1 = (j + 1) * w / g;
      const double v = df[static_cast<std::size_t>(i) * g + j] / ((y1 - y0) * (x1 - x0));
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          if (scene.channels() == 3) {
            for (int ch = 0; ch < 3; ++ch) grad.at(y, x, ch) = v * lum[ch];
          } else {
            grad.at(y, x, 0) = v;
          }
        }
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------

std::unique_ptr<TargetModel> model_from_json(const nlohmann::json& j) {
  const auto type = j.at("type").get<std::string>();
  if (type == "mock_marker") return std::make_unique<MockMarkerModel>(j.get<MockMarkerModelConfig>());
  if (type == "toy") return std::make_unique<ToyDifferentiableModel>(j.get<ToyModelConfig>());
  throw ConfigError(fmt::format("unknown model type '{}'", type));
}

std::unique_ptr<TargetModel> load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open model config '{}'", path.string()));
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("model config '{}': {}", path.string(), e.what()));
  }
  return model_from_json(j);
}

}  // namespace xdetect
