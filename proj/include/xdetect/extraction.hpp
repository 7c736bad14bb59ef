#pragma once

#include <functional>
#include <map>
#include <shared_mutex>
#include <string>

#include "json.hpp"
#include "xdetect/core.hpp"
#include "xdetect/imaging.hpp"

namespace xdetect {

class ExtractionError : public Error {
 public:
  using Error::Error;
};

enum class ExtractionMethod { bbox_crop, background_diff, external_hook };

/// Object extraction settings. Parameters per method:
///   bbox_crop:       padding
///   background_diff: padding, threshold
///   external_hook:   padding, hook
struct ExtractorSpec {
  ExtractionMethod method = ExtractionMethod::background_diff;
  double padding = 0.05;    // fraction of the bbox side added on each side
  double threshold = 0.15;  // background distance cut for background_diff
  std::string hook;         // registered extractor name for external_hook

  friend bool operator==(const ExtractorSpec&, const ExtractorSpec&) = default;
};

/// Throws ConfigError on unknown methods or parameters that do not belong to
/// the selected method.
void to_json(nlohmann::json& j, const ExtractorSpec& spec);
void from_json(const nlohmann::json& j, ExtractorSpec& spec);
std::string to_string(ExtractionMethod m);
ExtractionMethod parse_extraction_method(const std::string& s);

/// Hook contract: full scene raster plus the object's bbox in, binary mask
/// with the scene's dimensions out.
using ExternalExtractor = std::function<Mask(const Image&, const BBox&)>;

/// Write-once registry of external extractors, safe for concurrent readers.
class ExtractorRegistry {
 public:
  /// Throws ConfigError if `name` is already registered.
  void add(const std::string& name, ExternalExtractor fn);
  /// Throws ConfigError if `name` is unknown.
  ExternalExtractor get(const std::string& name) const;
  bool contains(const std::string& name) const;

  static ExtractorRegistry& global();

 private:
  mutable std::shared_mutex mu_;
  std::map<std::string, ExternalExtractor> fns_;
};

void register_external_extractor(const std::string& name, ExternalExtractor fn);

struct Extraction {
  Image image;     // cropped to the padded bbox, background zeroed
  Mask mask;       // same dims as `image`
  BBox crop_box;   // in scene coordinates
};

Extraction extract_object_detailed(const Image& scene, const BBox& bbox, const ExtractorSpec& spec,
                                   const ExtractorRegistry& registry = ExtractorRegistry::global());

/// Isolated main object. Throws ExtractionError("extraction produced no
/// object") when fewer than 1% of the returned pixels are foreground.
Image extract_object(const Image& scene, const ModelOutput& model_output, const ExtractorSpec& spec,
                     const ExtractorRegistry& registry = ExtractorRegistry::global());

}  // namespace xdetect
