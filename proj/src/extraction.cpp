#include "xdetect/extraction.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/core.h>
#include <mutex>

namespace xdetect {

std::string to_string(ExtractionMethod m) {
  switch (m) {
    case ExtractionMethod::bbox_crop: return "bbox_crop";
    case ExtractionMethod::background_diff: return "background_diff";
    case ExtractionMethod::external_hook: return "external_hook";
  }
  return "unknown";
}

ExtractionMethod parse_extraction_method(const std::string& s) {
  if (s == "bbox_crop") return ExtractionMethod::bbox_crop;
  if (s == "background_diff") return ExtractionMethod::background_diff;
  if (s == "external_hook") return ExtractionMethod::external_hook;
  throw ConfigError(fmt::format("unknown extraction method '{}'", s));
}

void to_json(nlohmann::json& j, const ExtractorSpec& spec) {
  j = nlohmann::json{{"method", to_string(spec.method)}, {"padding", spec.padding}};
  if (spec.method == ExtractionMethod::background_diff) j["threshold"] = spec.threshold;
  if (spec.method == ExtractionMethod::external_hook) j["hook"] = spec.hook;
}

void from_json(const nlohmann::json& j, ExtractorSpec& spec) {
  spec = ExtractorSpec{};
  spec.method = parse_extraction_method(j.at("method").get<std::string>());
  for (const auto& [key, value] : j.items()) {
    if (key == "method") continue;
    if (key == "padding") {
      spec.padding = value.get<double>();
    } else if (key == "threshold" && spec.method == ExtractionMethod::background_diff) {
      spec.threshold = value.get<double>();
    } else if (key == "hook" && spec.method == ExtractionMethod::external_hook) {
      spec.hook = value.get<std::string>();
    } else {
      throw ConfigError(fmt::format("parameter '{}' is not valid for extraction method {}", key,
                                    to_string(spec.method)));
    }
  }
  if (!(spec.padding >= 0.0 && spec.padding <= 1.0)) throw ConfigError("extraction padding must be in [0,1]");
  if (!(spec.threshold > 0.0 && spec.threshold < 1.0)) throw ConfigError("extraction threshold must be in (0,1)");
  if (spec.method == ExtractionMethod::external_hook && spec.hook.empty()) {
    throw ConfigError("external_hook extraction needs a 'hook' name");
  }
}

void ExtractorRegistry::add(const std::string& name, ExternalExtractor fn) {
  std::unique_lock lock(mu_);
  if (fns_.contains(name)) throw ConfigError(fmt::format("extractor '{}' already registered", name));
  fns_.emplace(name, std::move(fn));
}

ExternalExtractor ExtractorRegistry::get(const std::string& name) const {
  std::shared_lock lock(mu_);
  auto it = fns_.find(name);
  if (it == fns_.end()) throw ConfigError(fmt::format("no external extractor named '{}'", name));
  return it->second;
}

bool ExtractorRegistry::contains(const std::string& name) const {
  std::shared_lock lock(mu_);
  return fns_.contains(name);
}

ExtractorRegistry& ExtractorRegistry::global() {
  static ExtractorRegistry registry;
  return registry;
}

void register_external_extractor(const std::string& name, ExternalExtractor fn) {
  ExtractorRegistry::global().add(name, std::move(fn));
}

namespace {

struct IntBox {
  int x1, y1, x2, y2;
};

IntBox padded_box(const BBox& bbox, double padding, ImageDims dims) {
  const double px = padding * bbox.width(), py = padding * bbox.height();
  IntBox b{static_cast<int>(std::floor(bbox.x1 - px)), static_cast<int>(std::floor(bbox.y1 - py)),
           static_cast<int>(std::ceil(bbox.x2 + px)), static_cast<int>(std::ceil(bbox.y2 + py))};
  b.x1 = std::clamp(b.x1, 0, dims.width);
  b.y1 = std::clamp(b.y1, 0, dims.height);
  b.x2 = std::clamp(b.x2, 0, dims.width);
  b.y2 = std::clamp(b.y2, 0, dims.height);
  return b;
}

Mask crop_mask(const Mask& m, const IntBox& b) {
  Mask out(b.y2 - b.y1, b.x2 - b.x1);
  for (int y = b.y1; y < b.y2; ++y) {
    for (int x = b.x1; x < b.x2; ++x) out.at(y - b.y1, x - b.x1) = m.at(y, x) ? 1 : 0;
  }
  return out;
}

}  // namespace

Extraction extract_object_detailed(const Image& scene, const BBox& bbox, const ExtractorSpec& spec,
                                   const ExtractorRegistry& registry) {
  const ImageDims dims{scene.width(), scene.height()};
  validate_bbox(bbox, dims);
  const IntBox box = padded_box(bbox, spec.padding, dims);
  if (box.x2 <= box.x1 || box.y2 <= box.y1) throw ExtractionError("extraction produced no object");

  const Image crop = scene.crop(box.x1, box.y1, box.x2, box.y2);
  Mask mask;
  switch (spec.method) {
    case ExtractionMethod::bbox_crop:
      mask = Mask(crop.height(), crop.width(), 1);
      break;
    case ExtractionMethod::background_diff:
      mask = segment_foreground(crop, spec.threshold);
      break;
    case ExtractionMethod::external_hook: {
      const Mask full = registry.get(spec.hook)(scene, bbox);
      if (full.height != scene.height() || full.width != scene.width() ||
          full.data.size() != static_cast<std::size_t>(full.height) * full.width) {
        throw DimensionError(fmt::format("extractor '{}' returned a {}x{} mask for a {}x{} scene", spec.hook,
                                         full.width, full.height, scene.width(), scene.height()));
      }
      mask = crop_mask(full, box);
      break;
    }
  }

  const std::size_t fg = mask.count();
  if (fg == 0 || fg * 100 < mask.data.size()) throw ExtractionError("extraction produced no object");

  std::vector<double> data(crop.data().begin(), crop.data().end());
  const int c = crop.channels();
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    if (!mask.data[i]) std::fill_n(data.begin() + static_cast<std::ptrdiff_t>(i * c), c, 0.0);
  }
  Extraction out;
  out.image = Image(crop.height(), crop.width(), c, std::move(data));
  out.mask = std::move(mask);
  out.crop_box = BBox{static_cast<double>(box.x1), static_cast<double>(box.y1), static_cast<double>(box.x2),
                      static_cast<double>(box.y2)};
  return out;
}

Image extract_object(const Image& scene, const ModelOutput& model_output, const ExtractorSpec& spec,
                     const ExtractorRegistry& registry) {
  return extract_object_detailed(scene, model_output.bbox, spec, registry).image;
}

}  // namespace xdetect
