// xdetect: build prototype libraries, screen scenes for adversarial patches,
// evaluate detectors over manifests and craft patches against toy models.

#include <algorithm>
#include <fmt/core.h>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "xdetect/attack.hpp"
#include "xdetect/config.hpp"
#include "xdetect/corpus.hpp"
#include "xdetect/eval.hpp"
#include "xdetect/imaging.hpp"
#include "xdetect/log.hpp"

namespace fs = std::filesystem;
using namespace xdetect;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitAlert = 2;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> jobs;
  std::string mode;
  std::string space;
};

RunConfig resolve_config(const Globals& g) {
  RunConfig rc;
  if (!g.config.empty()) {
    rc = load_run_config(g.config);
  } else {
    rc.base_dir = ".";
  }
  if (g.seed) rc.seed = *g.seed;
  if (!g.out.empty()) rc.out = g.out;
  if (g.jobs) {
    if (*g.jobs < 1) throw ConfigError("--jobs must be at least 1");
    rc.jobs = *g.jobs;
  }
  if (!g.mode.empty() && g.mode != "all") rc.mode = parse_detector_mode(g.mode);
  if (!g.space.empty()) rc.space = parse_space(g.space);
  return rc;
}

std::unique_ptr<TargetModel> need_model(const std::optional<fs::path>& path) {
  if (!path) throw ConfigError("no model configured (set \"model\" in the run config)");
  return load_model(*path);
}

bool needs_library(DetectorMode m) { return m != DetectorMode::spd_only; }

PrototypeLibrary open_library(const RunConfig& rc, const TargetModel& model) {
  const fs::path dir = library_path(rc);
  PrototypeLibrary lib = load_library(dir);
  if (lib.classes().names() != model.spec().classes.names()) {
    throw ConfigError(fmt::format("library '{}' and model '{}' disagree on the class list", dir.string(),
                                  model.spec().name));
  }
  if (!(lib.extractor() == rc.oed.extractor)) {
    logger().warn("config extractor differs from the library's; scenes use the library's extractor");
  }
  return lib;
}

DetectorConfig detector_for(const RunConfig& rc, const PrototypeLibrary* lib) {
  DetectorConfig dc = detector_config(rc);
  if (lib) dc.oed.extractor = lib->extractor();
  return dc;
}

int cmd_build_prototypes(const RunConfig& rc, bool force, const std::string& prototypes_flag) {
  const fs::path src = !prototypes_flag.empty() ? fs::path(prototypes_flag)
                       : rc.oed.prototypes      ? *rc.oed.prototypes
                                                : throw ConfigError("no prototype image directory (oed.prototypes)");
  const fs::path dst = library_path(rc);
  if (fs::exists(dst / "index.json") && !force) {
    fmt::print(stderr, "error: library already exists at '{}'; pass --force to rebuild\n", dst.string());
    return kExitError;
  }
  std::vector<std::string> classes;
  if (rc.model) {
    classes = load_model(*rc.model)->spec().classes.names();
  } else {
    if (!fs::is_directory(src)) throw IoError(fmt::format("prototype directory '{}' not found", src.string()));
    for (const auto& d : fs::directory_iterator(src)) {
      if (d.is_directory()) classes.push_back(d.path().filename().string());
    }
    std::sort(classes.begin(), classes.end());
  }
  std::vector<std::string> problems;
  std::vector<std::vector<NamedImage>> images(classes.size());
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const fs::path dir = src / classes[c];
    if (!fs::is_directory(dir)) {
      problems.push_back(fmt::format("class '{}': directory '{}' missing", classes[c], dir.string()));
      continue;
    }
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(dir)) {
      if (f.is_regular_file() && f.path().extension() == ".png") files.push_back(f.path());
    }
    std::sort(files.begin(), files.end());
    if (files.size() < static_cast<std::size_t>(rc.oed.n_per_class)) {
      problems.push_back(fmt::format("class '{}': {} images, needs {}", classes[c], files.size(), rc.oed.n_per_class));
      continue;
    }
    files.resize(static_cast<std::size_t>(rc.oed.n_per_class));
    for (const auto& f : files) images[c].push_back(NamedImage{f.filename().string(), read_png(f)});
  }
  if (!problems.empty()) {
    fmt::print(stderr, "error: prototype validation failed\n");
    for (const auto& p : problems) fmt::print(stderr, "  {}\n", p);
    return kExitError;
  }
  const auto lib = build_prototype_library(ClassRegistry(classes), images, rc.oed.n_per_class, rc.oed.extractor,
                                           rc.oed.sift, rc.jobs);
  if (fs::exists(dst)) fs::remove_all(dst);
  save_library(lib, dst);
  std::size_t descriptors = 0;
  for (const auto& e : lib.entries()) descriptors += e.descriptors.size();
  fmt::print("library: {}\nclasses: {}\nentries: {}\ndescriptors: {}\n", dst.string(), classes.size(), lib.size(),
             descriptors);
  return kExitOk;
}

int cmd_detect(const RunConfig& rc, const std::string& image_path) {
  const auto model = need_model(rc.model);
  std::optional<PrototypeLibrary> lib;
  if (needs_library(rc.mode)) lib = open_library(rc, *model);
  const Image scene = read_png(image_path);
  Verdict v = run_detector(scene, *model, rc.mode, lib ? &*lib : nullptr, detector_for(rc, lib ? &*lib : nullptr));
  if (v.alert) write_explanation(v, rc.out / "explanations", fs::path(image_path).stem().string());
  std::cout << verdict_to_json(v, &model->spec().classes).dump(2) << '\n';
  return v.alert ? kExitAlert : kExitOk;
}

int cmd_evaluate(const RunConfig& rc, const std::string& manifest_path, const std::string& mode_flag,
                 const std::string& schema_flag) {
  const auto model = need_model(rc.model);
  const SceneManifest manifest = load_manifest(
      manifest_path, schema_flag.empty() ? std::nullopt : std::optional(parse_manifest_schema(schema_flag)));
  if (manifest.entries.empty()) {
    fmt::print(stderr, "error: manifest '{}' has no entries\n", manifest_path);
    return kExitError;
  }
  std::vector<DetectorMode> modes;
  if (mode_flag == "all") modes.assign(std::begin(kAllModes), std::end(kAllModes));
  else modes.push_back(rc.mode);
  std::optional<PrototypeLibrary> lib;
  if (std::any_of(modes.begin(), modes.end(), needs_library)) lib = open_library(rc, *model);
  const DetectorConfig dc = detector_for(rc, lib ? &*lib : nullptr);

  fs::create_directories(rc.out);
  fmt::print("{:<10} {:>9} {:>9} {:>9} {:>9} {:>9} {:>10} {:>7}\n", "mode", "DA", "TPR", "TNR", "FPR", "FNR",
             "time_s", "skipped");
  auto cell = [](std::optional<double> v) { return v ? fmt::format("{:.6f}", *v) : std::string("undef"); };
  for (DetectorMode m : modes) {
    const auto records = run_evaluation(manifest, *model, m, lib ? &*lib : nullptr, dc, rc.seed, rc.jobs);
    MetricsReport report = compute_metrics(records, manifest);
    report.label = to_string(m);
    emit_report(report, ReportFormat::csv, rc.out / fmt::format("report_{}.csv", to_string(m)));
    emit_report(report, ReportFormat::json, rc.out / fmt::format("report_{}.json", to_string(m)));
    std::ofstream verdicts(rc.out / fmt::format("verdicts_{}.jsonl", to_string(m)));
    for (const auto& rec : records) {
      nlohmann::json row{{"image_id", manifest.entries[rec.entry_index].image_id},
                         {"is_adversarial", manifest.entries[rec.entry_index].is_adversarial}};
      if (rec.verdict) row["verdict"] = verdict_to_json(*rec.verdict);
      else row["skipped"] = rec.skip_reason;
      verdicts << row.dump() << '\n';
    }
    fmt::print("{:<10} {:>9} {:>9} {:>9} {:>9} {:>9} {:>10.6f} {:>7}\n", to_string(m), cell(report.rates.da),
               cell(report.rates.tpr), cell(report.rates.tnr), cell(report.rates.fpr), cell(report.rates.fnr),
               report.mean_latency_s, report.skipped);
  }
  return kExitOk;
}

int cmd_craft_patch(const RunConfig& rc, bool seed_overridden) {
  if (!rc.attack) throw ConfigError("run config has no attack section");
  const auto& at = *rc.attack;
  AttackConfig cfg = at.config;
  if (seed_overridden) cfg.seed = rc.seed;
  if (!at.patch_side_explicit) cfg.patch_side = default_patch_side(rc.space);
  cfg.jobs = rc.jobs;
  const auto model = need_model(at.model ? at.model : rc.model);
  if (!model->spec().has_gradient) {
    throw CapabilityError(fmt::format("model '{}' exposes no gradient", model->spec().name));
  }
  if (!at.manifest) throw ConfigError("attack.manifest is required to supply scenes");
  const SceneManifest manifest = load_manifest(*at.manifest);
  std::vector<AttackScene> scenes;
  for (const auto& e : manifest.entries) {
    if (e.is_adversarial) continue;
    if (static_cast<int>(scenes.size()) >= at.max_scenes) break;
    scenes.push_back(AttackScene{read_png(e.image_path), e.annotation.bbox});
  }
  if (scenes.empty()) throw ValidationError("attack manifest supplies no benign scenes");

  std::optional<PrototypeLibrary> lib;
  OeContext oe;
  const bool oe_mode = cfg.adaptive_mode == AdaptiveMode::oe_sift || cfg.adaptive_mode == AdaptiveMode::ensemble;
  if (oe_mode && cfg.lambda_oe != 0.0) {
    lib = load_library(library_path(rc));
    if (!at.target_prototype) throw ConfigError("attack.target_prototype is required for the oe_sift penalty");
    oe.target_prototype = lib->find(*at.target_prototype);
    if (!oe.target_prototype) throw ConfigError(fmt::format("prototype '{}' not in the library", *at.target_prototype));
    oe.extractor = lib->extractor();
    oe.sift = lib->sift_params();
  }
  const CraftResult result = craft_patch(cfg, scenes, *model, oe.target_prototype ? &oe : nullptr);
  save_patch(result, cfg, rc.out, "patch");
  if (result.diverged) {
    fmt::print(stderr, "error: {} (trace kept in '{}')\n", result.error, (rc.out / "patch_trace.csv").string());
    return kExitError;
  }
  fmt::print("patch: {}\nside: {}\ninitial_loss: {:.6f}\nfinal_loss: {:.6f}\nfinal_target_prob: {:.6f}\n",
             (rc.out / "patch.png").string(), result.patch.side(), result.trace.front().loss, result.final_loss(),
             result.trace.back().target_prob);
  return kExitOk;
}

int cmd_generate_corpus(const RunConfig& rc, const corpus::CorpusConfig& cc_in) {
  corpus::CorpusConfig cc = cc_in;
  cc.seed = rc.seed;
  const auto cp = corpus::make_corpus(cc);
  const fs::path out = rc.out;
  corpus::write_corpus(cp, out);

  nlohmann::json toy = random_toy_config(cp.world.registry.names(), rc.seed + 100, 0.3);
  toy["type"] = "toy";
  std::ofstream(out / "toy.json") << toy.dump() << '\n';

  AttackConfig ac;
  ac.patch_side = 64;
  ac.target_class = cc.n_classes > 1 ? 1 : 0;
  ac.seed = rc.seed;
  ac.sp_transforms = adaptive_sp_transforms(rc.space, true, rc.seed);
  std::ofstream(out / "attack.json") << nlohmann::json(ac).dump(1) << '\n';

  nlohmann::json cfg{{"model", "model.json"},
                     {"mode", to_string(rc.mode)},
                     {"space", to_string(rc.space)},
                     {"seed", rc.seed},
                     {"out", "."},
                     {"jobs", rc.jobs},
                     {"oed", {{"k", 7}, {"n_per_class", cc.prototypes_per_class}, {"prototypes", "prototypes"}}},
                     {"attack", {{"config", "attack.json"}, {"model", "toy.json"}, {"manifest", "manifest.json"}}}};
  std::ofstream(out / "config.json") << cfg.dump(1) << '\n';
  fmt::print("corpus: {}\nscenes: {}\nclasses: {}\nprototype images: {}\n", out.string(), cp.scenes.size(),
             cc.n_classes, cc.n_classes * cc.prototypes_per_class);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial patch detection for object detectors"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Run configuration (JSON)");
  app.add_option("--seed", g.seed, "Seed for every stochastic step");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--jobs", g.jobs, "Worker threads");
  app.add_option("--mode", g.mode, "oed_only|spd_only|mv|two_tier (evaluate also accepts all)");
  app.add_option("--space", g.space, "digital|physical");

  bool force = false;
  std::string prototypes;
  auto* build = app.add_subcommand("build-prototypes", "Extract and index prototype images");
  build->add_flag("--force", force, "Overwrite an existing library");
  build->add_option("--prototypes", prototypes, "Directory with one sub-directory of images per class");

  std::string image;
  auto* detect = app.add_subcommand("detect", "Screen one scene; exit 0 = clean, 2 = alert, 1 = error");
  detect->add_option("image", image, "Scene raster (PNG)")->required();

  std::string manifest, schema;
  auto* evaluate = app.add_subcommand("evaluate", "Run detectors over a manifest and write reports");
  evaluate->add_option("manifest", manifest, "Scene manifest (JSON)")->required();
  evaluate->add_option("--schema", schema, "coco_like|superstore (default: as declared)");

  auto* craft = app.add_subcommand("craft-patch", "Craft an adversarial patch against a differentiable model");

  corpus::CorpusConfig cc;
  auto* gen = app.add_subcommand("generate-corpus", "Write a synthetic benchmark corpus");
  gen->add_option("--classes", cc.n_classes, "Number of classes");
  gen->add_option("--per-class", cc.prototypes_per_class, "Prototype images per class");
  gen->add_option("--benign", cc.n_benign, "Benign scenes");
  gen->add_option("--patched", cc.n_patched, "Marker-patched scenes");

  for (auto* sub : {build, detect, evaluate, craft, gen}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitError;
  }

  try {
    const RunConfig rc = resolve_config(g);
    if (*build) return cmd_build_prototypes(rc, force, prototypes);
    if (*detect) return cmd_detect(rc, image);
    if (*evaluate) return cmd_evaluate(rc, manifest, g.mode, schema);
    if (*craft) return cmd_craft_patch(rc, g.seed.has_value());
    if (*gen) return cmd_generate_corpus(rc, cc);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitError;
  }
  return kExitError;
}
