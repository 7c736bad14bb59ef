#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xdetect/core.hpp"
#include "xdetect/extraction.hpp"
#include "xdetect/models.hpp"
#include "xdetect/sift.hpp"

namespace xdetect {

struct PrototypeEntry {
  std::string prototype_id;
  ClassId class_id = 0;
  Image image;  // extracted object
  std::vector<sift::Keypoint> keypoints;
  std::vector<sift::Descriptor> descriptors;
};

/// Immutable prototype set, entries ordered by prototype_id.
class PrototypeLibrary {
 public:
  PrototypeLibrary() = default;
  /// Throws ValidationError unless every class has exactly n_per_class
  /// entries with nonempty descriptors and ids are unique.
  PrototypeLibrary(ClassRegistry classes, int n_per_class, sift::SiftParams sift, ExtractorSpec extractor,
                   std::vector<PrototypeEntry> entries);

  const ClassRegistry& classes() const { return classes_; }
  int n_per_class() const { return n_per_class_; }
  const sift::SiftParams& sift_params() const { return sift_; }
  const ExtractorSpec& extractor() const { return extractor_; }
  const std::vector<PrototypeEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  const PrototypeEntry* find(const std::string& prototype_id) const;

 private:
  ClassRegistry classes_;
  int n_per_class_ = 0;
  sift::SiftParams sift_;
  ExtractorSpec extractor_;
  std::vector<PrototypeEntry> entries_;
};

struct NamedImage {
  std::string name;
  Image image;
};

/// `images[c]` holds the candidate images of class c; the first n_per_class
/// are used. Each image is treated as object-centric (its full frame is the
/// bbox handed to the extractor).
PrototypeLibrary build_prototype_library(const ClassRegistry& classes, const std::vector<std::vector<NamedImage>>& images,
                                         int n_per_class, const ExtractorSpec& extractor,
                                         const sift::SiftParams& sift, int jobs = 1);

/// Layout: <dir>/<class_name>/<prototype_id>.png plus <dir>/index.json with
/// keypoints and base64 float32 descriptors. Scores are reproduced exactly
/// after reload because descriptors are stored, not recomputed.
void save_library(const PrototypeLibrary& lib, const std::filesystem::path& dir);
PrototypeLibrary load_library(const std::filesystem::path& dir);

std::string encode_descriptors(const std::vector<sift::Descriptor>& descriptors);
std::vector<sift::Descriptor> decode_descriptors(const std::string& text);

struct PrototypeScore {
  std::string prototype_id;
  ClassId class_id = 0;
  std::size_t match_count = 0;

  friend bool operator==(const PrototypeScore&, const PrototypeScore&) = default;
};

/// Sorted by (match_count desc, prototype_id asc).
std::vector<PrototypeScore> score_prototypes(const std::vector<sift::Descriptor>& query, const PrototypeLibrary& lib,
                                             int jobs = 1);
std::vector<PrototypeScore> score_prototypes(const Image& query, const PrototypeLibrary& lib, int jobs = 1);

struct KnnResult {
  ClassId class_id = 0;
  ClassDistribution votes;  // per-class votes / k
  std::vector<PrototypeScore> neighbours;
};

/// Majority over the top-k scores; vote ties go to the larger summed match
/// count, then the lowest class id. k beyond the score count is clamped.
/// Zero-match prototypes are dropped from the neighbours unless every
/// top-k score is zero; votes are fractions of the remaining neighbours.
KnnResult prototype_knn_classify(std::vector<PrototypeScore> scores, int k, std::size_t n_classes);

struct OedConfig {
  int k = 7;
  ExtractorSpec extractor;
  int jobs = 1;
};

struct OedResult {
  std::optional<ClassId> class_id;  // nullopt: inconclusive
  std::optional<ClassDistribution> votes;
  std::vector<PrototypeScore> scores;
  Extraction extraction;
  sift::Features query;
  std::string note;

  bool inconclusive() const { return !class_id.has_value(); }
};

/// Inconclusive when the extracted object has no descriptors or matches no
/// prototype at all. Extraction failures propagate.
OedResult oed_classify(const Image& scene, const ModelOutput& model_output, const PrototypeLibrary& lib,
                       const OedConfig& cfg);

/// Query and prototype side by side, matched keypoints joined by lines.
Image render_match_overlay(const Image& query, const sift::Features& query_features, const PrototypeEntry& proto,
                           double match_ratio);

}  // namespace xdetect
