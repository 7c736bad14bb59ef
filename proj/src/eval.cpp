#include "xdetect/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/core.h>
#include <fmt/format.h>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "xdetect/imaging.hpp"
#include "xdetect/log.hpp"
#include "xdetect/parallel.hpp"

namespace xdetect {

namespace fs = std::filesystem;

std::string to_string(ManifestSchema s) { return s == ManifestSchema::superstore ? "superstore" : "coco_like"; }

ManifestSchema parse_manifest_schema(const std::string& s) {
  if (s == "coco_like") return ManifestSchema::coco_like;
  if (s == "superstore") return ManifestSchema::superstore;
  throw ConfigError(fmt::format("unknown manifest schema '{}' (coco_like|superstore)", s));
}

namespace {

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out = fmt::format("manifest validation failed ({} problem{})", lines.size(), lines.size() == 1 ? "" : "s");
  for (const auto& l : lines) out += "\n  " + l;
  return out;
}

}  // namespace

ManifestError::ManifestError(std::vector<std::string> problems)
    : ValidationError(join_lines(problems)), problems_(std::move(problems)) {}

const std::vector<std::string>& superstore_attribute_values(const std::string& key) {
  static const std::map<std::string, std::vector<std::string>> table{
      {"light", {"true", "false"}},
      {"expensive", {"true", "false"}},
      {"hand_location", {"top", "side", "bottom"}},
      {"background", {"office", "products"}},
      {"visual_angle", {"left", "straight", "right"}},
  };
  static const std::vector<std::string> none;
  auto it = table.find(key);
  return it == table.end() ? none : it->second;
}

namespace {

std::optional<ManifestEntry> parse_entry(const nlohmann::json& j, std::size_t index, const fs::path& base,
                                         const ClassRegistry& classes, ManifestSchema schema,
                                         std::vector<std::string>& problems) {
  ManifestEntry e;
  e.image_id = j.contains("image_id") ? (j["image_id"].is_string() ? j["image_id"].get<std::string>()
                                                                   : j["image_id"].dump())
                                      : fmt::format("#{}", index);
  const std::size_t before = problems.size();
  auto problem = [&](const std::string& msg) { problems.push_back(fmt::format("entry {} ({}): {}", index, e.image_id, msg)); };

  try {
    if (!j.contains("image")) {
      problem("missing 'image'");
    } else {
      const fs::path p = j["image"].get<std::string>();
      e.image_path = p.is_absolute() ? p : base / p;
      try {
        e.dims = read_png_dims(e.image_path);
      } catch (const Error& err) {
        problem(fmt::format("image '{}' unreadable: {}", e.image_path.string(), err.what()));
      }
    }

    std::optional<ClassId> label;
    if (j.contains("label_id")) {
      const ClassId id = j["label_id"].get<ClassId>();
      if (!classes.contains(id)) problem(fmt::format("unknown label id {}", id));
      else label = id;
    }
    if (j.contains("label_name")) {
      const auto name = j["label_name"].get<std::string>();
      const auto id = classes.find(name);
      if (!id) problem(fmt::format("unknown label '{}'", name));
      else if (label && *label != *id) problem(fmt::format("label id {} does not name '{}'", *label, name));
      else label = id;
    }
    if (!j.contains("label_id") && !j.contains("label_name")) problem("missing label");
    if (label) {
      e.annotation.label_id = *label;
      e.annotation.label_name = classes.name(*label);
    }

    if (!j.contains("is_adversarial") || !j["is_adversarial"].is_boolean()) {
      problem("missing boolean 'is_adversarial'");
    } else {
      e.is_adversarial = j["is_adversarial"].get<bool>();
    }
    if (j.contains("attack_id") && !j["attack_id"].is_null()) e.attack_id = j["attack_id"].get<std::string>();
    e.scenario = j.value("scenario", std::string{});

    const bool have_dims = e.dims.width > 0;
    if (j.contains("bbox_yolo") == j.contains("bbox_xyxy")) {
      problem("exactly one of 'bbox_yolo' or 'bbox_xyxy' is required");
    } else if (have_dims) {
      try {
        if (j.contains("bbox_yolo")) {
          const auto v = j["bbox_yolo"].get<std::vector<double>>();
          if (v.size() != 4) throw ValidationError("bbox_yolo needs four numbers");
          e.annotation.bbox = bbox_yolo_to_xyxy(YoloBox{v[0], v[1], v[2], v[3]}, e.dims);
        } else {
          const auto v = j["bbox_xyxy"].get<std::vector<double>>();
          if (v.size() != 4) throw ValidationError("bbox_xyxy needs four numbers");
          e.annotation.bbox = BBox{v[0], v[1], v[2], v[3]};
          validate_bbox(e.annotation.bbox, e.dims);
        }
      } catch (const Error& err) {
        problem(fmt::format("malformed bbox: {}", err.what()));
      }
    }

    if (j.contains("attributes")) {
      for (const auto& [key, val] : j["attributes"].items()) {
        e.annotation.attributes[key] = val.is_string() ? val.get<std::string>() : val.dump();
      }
    }
    if (schema == ManifestSchema::superstore) {
      for (const char* key : {"light", "expensive", "hand_location", "background", "visual_angle"}) {
        if (!e.annotation.attributes.count(key)) problem(fmt::format("missing attribute '{}'", key));
      }
      for (const auto& [key, val] : e.annotation.attributes) {
        const auto& allowed = superstore_attribute_values(key);
        if (allowed.empty()) {
          problem(fmt::format("unknown attribute '{}'", key));
        } else if (std::find(allowed.begin(), allowed.end(), val) == allowed.end()) {
          problem(fmt::format("attribute {}='{}' not one of {}", key, val, fmt::join(allowed, "|")));
        }
      }
    }
  } catch (const nlohmann::json::exception& err) {
    problem(fmt::format("malformed field: {}", err.what()));
  }
  if (problems.size() != before) return std::nullopt;
  return e;
}

}  // namespace

SceneManifest load_manifest(const fs::path& path, std::optional<ManifestSchema> schema) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open manifest '{}'", path.string()));
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("manifest '{}' is not valid JSON: {}", path.string(), e.what()));
  }
  SceneManifest m;
  try {
    const auto declared = j.contains("schema") ? std::optional(parse_manifest_schema(j["schema"].get<std::string>()))
                                               : std::nullopt;
    if (schema && declared && *schema != *declared) {
      throw ValidationError(fmt::format("manifest declares schema {} but {} was requested", to_string(*declared),
                                        to_string(*schema)));
    }
    if (!schema && !declared) throw ValidationError("manifest schema not declared");
    m.schema = schema ? *schema : *declared;
    m.classes = ClassRegistry(j.at("classes").get<std::vector<std::string>>());
    const auto& entries = j.at("entries");
    if (!entries.is_array()) throw ValidationError("'entries' must be an array");
    std::vector<std::string> problems;
    const fs::path base = path.parent_path();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (auto e = parse_entry(entries[i], i, base, m.classes, m.schema, problems)) m.entries.push_back(std::move(*e));
    }
    if (!problems.empty()) throw ManifestError(std::move(problems));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("manifest '{}': {}", path.string(), e.what()));
  }
  return m;
}

void write_manifest(const SceneManifest& manifest, const fs::path& path) {
  nlohmann::json j;
  j["schema"] = to_string(manifest.schema);
  j["classes"] = manifest.classes.names();
  nlohmann::json entries = nlohmann::json::array();
  const fs::path base = path.parent_path();
  for (const auto& e : manifest.entries) {
    std::error_code ec;
    fs::path rel = fs::relative(e.image_path, base.empty() ? fs::path(".") : base, ec);
    if (ec || rel.empty()) rel = e.image_path;
    nlohmann::json je{{"image_id", e.image_id},
                      {"image", rel.generic_string()},
                      {"label_id", e.annotation.label_id},
                      {"label_name", e.annotation.label_name},
                      {"bbox_xyxy", {e.annotation.bbox.x1, e.annotation.bbox.y1, e.annotation.bbox.x2, e.annotation.bbox.y2}},
                      {"is_adversarial", e.is_adversarial}};
    if (e.attack_id) je["attack_id"] = *e.attack_id;
    if (!e.scenario.empty()) je["scenario"] = e.scenario;
    if (!e.annotation.attributes.empty()) je["attributes"] = e.annotation.attributes;
    entries.push_back(std::move(je));
  }
  j["entries"] = entries;
  if (!base.empty()) fs::create_directories(base);
  std::ofstream out(path);
  out << j.dump(1) << '\n';
  if (!out) throw IoError(fmt::format("failed writing manifest '{}'", path.string()));
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

TransformSet reseed(const TransformSet& set, std::uint64_t entry_seed) {
  if (set.empty()) return set;
  std::vector<TransformSpec> specs = set.specs();
  for (auto& s : specs) {
    if (s.seed) s.seed = splitmix(*s.seed ^ entry_seed);
  }
  return TransformSet(std::move(specs));
}

}  // namespace

std::vector<EvalRecord> run_evaluation(const SceneManifest& manifest, const TargetModel& model, DetectorMode mode,
                                       const PrototypeLibrary* lib, const DetectorConfig& cfg, std::uint64_t seed,
                                       int jobs) {
  std::vector<EvalRecord> records(manifest.entries.size());
  parallel_for(records.size(), jobs, [&](std::size_t i) {
    const ManifestEntry& e = manifest.entries[i];
    EvalRecord& rec = records[i];
    rec.entry_index = i;
    try {
      const Image scene = read_png(e.image_path);
      DetectorConfig local = cfg;
      local.jobs = 1;
      local.transforms = reseed(cfg.transforms, splitmix(seed ^ fnv1a(e.image_id)));
      rec.verdict = run_detector(scene, model, mode, lib, local);
    } catch (const std::exception& ex) {
      rec.skip_reason = ex.what();
      logger().warn("entry {} ({}) skipped: {}", i, e.image_id, ex.what());
    }
  });
  return records;
}

Rates rates_from_counts(const Counts& c) {
  auto ratio = [](std::size_t num, std::size_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  Rates r;
  r.da = ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn);
  r.tpr = ratio(c.tp, c.tp + c.fn);
  r.fnr = ratio(c.fn, c.tp + c.fn);
  r.tnr = ratio(c.tn, c.tn + c.fp);
  r.fpr = ratio(c.fp, c.tn + c.fp);
  return r;
}

namespace {

void tally(Counts& c, const Outcome& o) {
  if (o.is_adversarial) {
    (o.alert ? c.tp : c.fn)++;
  } else {
    (o.alert ? c.fp : c.tn)++;
  }
}

}  // namespace

MetricsReport compute_metrics(const std::vector<Outcome>& outcomes, std::size_t skipped) {
  MetricsReport r;
  r.skipped = skipped;
  std::map<std::string, Counts> groups;
  std::vector<double> lat;
  lat.reserve(outcomes.size());
  for (const auto& o : outcomes) {
    tally(r.counts, o);
    if (!o.scenario.empty()) tally(groups[o.scenario], o);
    lat.push_back(o.latency_s);
  }
  r.rates = rates_from_counts(r.counts);
  for (const auto& [name, c] : groups) r.per_scenario[name] = {c, rates_from_counts(c)};
  if (!lat.empty()) {
    double sum = 0.0;
    for (double v : lat) sum += v;
    r.mean_latency_s = sum / static_cast<double>(lat.size());
    std::sort(lat.begin(), lat.end());
    const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(lat.size())));
    r.p95_latency_s = lat[std::max<std::size_t>(rank, 1) - 1];
  }
  return r;
}

MetricsReport compute_metrics(const std::vector<EvalRecord>& records, const SceneManifest& manifest) {
  std::vector<Outcome> outcomes;
  std::size_t skipped = 0;
  for (const auto& rec : records) {
    if (!rec.verdict) {
      ++skipped;
      continue;
    }
    const auto& e = manifest.entries.at(rec.entry_index);
    outcomes.push_back(Outcome{e.is_adversarial, rec.verdict->alert, rec.verdict->latency_s, e.scenario});
  }
  return compute_metrics(outcomes, skipped);
}

std::optional<double> scenario_std(const MetricsReport& r, std::optional<double> Rates::*metric) {
  std::vector<double> vals;
  for (const auto& [name, group] : r.per_scenario) {
    if (const auto v = group.second.*metric) vals.push_back(*v);
  }
  if (vals.empty()) return std::nullopt;
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= static_cast<double>(vals.size());
  double var = 0.0;
  for (double v : vals) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(vals.size()));
}

namespace {

std::string num(std::optional<double> v, const char* undefined) {
  return v ? fmt::format("{:.6f}", *v) : std::string(undefined);
}

std::string counts_json(const Counts& c) {
  return fmt::format("{{\"TP\": {}, \"TN\": {}, \"FP\": {}, \"FN\": {}}}", c.tp, c.tn, c.fp, c.fn);
}

std::string rates_json(const Rates& r, const std::string& indent) {
  return fmt::format("{0}\"DA\": {1},\n{0}\"TPR\": {2},\n{0}\"TNR\": {3},\n{0}\"FPR\": {4},\n{0}\"FNR\": {5}", indent,
                     num(r.da, "null"), num(r.tpr, "null"), num(r.tnr, "null"), num(r.fpr, "null"),
                     num(r.fnr, "null"));
}

}  // namespace

std::string format_report(const MetricsReport& r, ReportFormat f) {
  if (f == ReportFormat::csv) {
    std::string out = "metric,value\n";
    out += "DA," + num(r.rates.da, "undefined") + "\n";
    out += "TPR," + num(r.rates.tpr, "undefined") + "\n";
    out += "TNR," + num(r.rates.tnr, "undefined") + "\n";
    out += "FPR," + num(r.rates.fpr, "undefined") + "\n";
    out += "FNR," + num(r.rates.fnr, "undefined") + "\n";
    out += fmt::format("inference_time_s,{:.6f}\n", r.mean_latency_s);
    return out;
  }
  std::string out = "{\n";
  out += fmt::format("  \"label\": {},\n", nlohmann::json(r.label).dump());
  out += fmt::format("  \"counts\": {},\n", counts_json(r.counts));
  out += rates_json(r.rates, "  ") + ",\n";
  out += fmt::format("  \"mean_latency_s\": {:.6f},\n", r.mean_latency_s);
  out += fmt::format("  \"p95_latency_s\": {:.6f},\n", r.p95_latency_s);
  out += fmt::format("  \"skipped\": {},\n", r.skipped);
  out += "  \"per_scenario\": {";
  bool first = true;
  for (const auto& [name, group] : r.per_scenario) {
    out += first ? "\n" : ",\n";
    first = false;
    out += fmt::format("    {}: {{\n      \"counts\": {},\n{}\n    }}", nlohmann::json(name).dump(),
                       counts_json(group.first), rates_json(group.second, "      "));
  }
  out += first ? "}\n" : "\n  }\n";
  out += "}\n";
  return out;
}

void emit_report(const MetricsReport& r, ReportFormat f, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot write report '{}'", path.string()));
  out << format_report(r, f);
  if (!out) throw IoError(fmt::format("failed writing report '{}'", path.string()));
}

MetricsReport load_report_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open report '{}'", path.string()));
  try {
    nlohmann::json j;
    in >> j;
    auto counts = [](const nlohmann::json& c) {
      return Counts{c.at("TP").get<std::size_t>(), c.at("TN").get<std::size_t>(), c.at("FP").get<std::size_t>(),
                    c.at("FN").get<std::size_t>()};
    };
    MetricsReport r;
    r.label = j.value("label", std::string{});
    r.counts = counts(j.at("counts"));
    r.rates = rates_from_counts(r.counts);
    r.mean_latency_s = j.at("mean_latency_s").get<double>();
    r.p95_latency_s = j.at("p95_latency_s").get<double>();
    r.skipped = j.at("skipped").get<std::size_t>();
    for (const auto& [name, g] : j.at("per_scenario").items()) {
      const Counts c = counts(g.at("counts"));
      r.per_scenario[name] = {c, rates_from_counts(c)};
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("report '{}': {}", path.string(), e.what()));
  }
}

}  // namespace xdetect
