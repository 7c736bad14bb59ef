#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xdetect/core.hpp"
#include "xdetect/ensemble.hpp"

namespace xdetect {

enum class ManifestSchema { coco_like, superstore };
std::string to_string(ManifestSchema s);
ManifestSchema parse_manifest_schema(const std::string& s);

/// Aggregated manifest problems, one line per offending entry.
class ManifestError : public ValidationError {
 public:
  explicit ManifestError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct ManifestEntry {
  std::string image_id;
  std::filesystem::path image_path;  // resolved against the manifest's directory
  ImageDims dims;
  Annotation annotation;  // bbox always xyxy
  bool is_adversarial = false;
  std::optional<std::string> attack_id;
  std::string scenario;  // free grouping key, "" when absent
};

struct SceneManifest {
  ManifestSchema schema = ManifestSchema::coco_like;
  ClassRegistry classes;
  std::vector<ManifestEntry> entries;
};

/// JSON layout:
///   {"schema": "coco_like"|"superstore", "classes": [names],
///    "entries": [{"image_id", "image", "label_id"|"label_name",
///                 "bbox_yolo": [cx,cy,w,h] | "bbox_xyxy": [x1,y1,x2,y2],
///                 "is_adversarial", "attack_id"?, "scenario"?, "attributes"?}]}
/// Throws ManifestError listing every bad entry.
SceneManifest load_manifest(const std::filesystem::path& path, std::optional<ManifestSchema> schema = std::nullopt);
/// Image paths are written relative to the manifest's directory when possible.
void write_manifest(const SceneManifest& manifest, const std::filesystem::path& path);

/// Superstore attribute enumerations; empty when the key is unknown.
const std::vector<std::string>& superstore_attribute_values(const std::string& key);

struct EvalRecord {
  std::size_t entry_index = 0;
  std::optional<Verdict> verdict;
  std::string skip_reason;
};

/// One record per entry, in manifest order. Stochastic transforms get a seed
/// derived from (seed, image_id) so results do not depend on entry order.
std::vector<EvalRecord> run_evaluation(const SceneManifest& manifest, const TargetModel& model, DetectorMode mode,
                                       const PrototypeLibrary* lib, const DetectorConfig& cfg, std::uint64_t seed,
                                       int jobs = 1);

struct Outcome {
  bool is_adversarial = false;
  bool alert = false;
  double latency_s = 0.0;
  std::string scenario;
};

struct Counts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  friend bool operator==(const Counts&, const Counts&) = default;
};

struct Rates {
  std::optional<double> da, tpr, tnr, fpr, fnr;  // nullopt: zero denominator
  friend bool operator==(const Rates&, const Rates&) = default;
};

Rates rates_from_counts(const Counts& c);

struct MetricsReport {
  std::string label;
  Counts counts;
  Rates rates;
  double mean_latency_s = 0.0;
  double p95_latency_s = 0.0;
  std::size_t skipped = 0;
  std::map<std::string, std::pair<Counts, Rates>> per_scenario;
};

MetricsReport compute_metrics(const std::vector<Outcome>& outcomes, std::size_t skipped = 0);
MetricsReport compute_metrics(const std::vector<EvalRecord>& records, const SceneManifest& manifest);

/// Standard deviation (population) of a rate over the per-scenario groups
/// that define it; nullopt with fewer than one defined group.
std::optional<double> scenario_std(const MetricsReport& r, std::optional<double> Rates::*metric);

enum class ReportFormat { csv, json };

/// Fixed key order, numbers with 6 decimals, undefined rates as null (json)
/// or "undefined" (csv).
std::string format_report(const MetricsReport& r, ReportFormat f);
void emit_report(const MetricsReport& r, ReportFormat f, const std::filesystem::path& path);
/// Reads a JSON report; rates are recomputed from the counts.
MetricsReport load_report_json(const std::filesystem::path& path);

}  // namespace xdetect
