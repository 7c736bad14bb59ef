#include "xdetect/corpus.hpp"

#include <fmt/core.h>
#include <fstream>

#include "xdetect/imaging.hpp"

namespace xdetect::corpus {

namespace fs = std::filesystem;

MockMarkerModelConfig mock_config_for_world(const synth::World& world, ClassId hijack_class) {
  MockMarkerModelConfig cfg;
  cfg.classes = world.registry.names();
  const double spacing = 360.0 / static_cast<double>(world.classes.size());
  for (std::size_t c = 0; c < world.classes.size(); ++c) {
    HueRule r;
    r.class_id = static_cast<ClassId>(c);
    r.hue_deg = world.classes[c].hue_deg;
    r.max_hue_distance = 0.5 * spacing;
    cfg.rules.push_back(r);
  }
  cfg.hijack_class = hijack_class;
  return cfg;
}

Image paste_marker(const Image& scene, const MarkerSpec& marker, double cx, double cy) {
  const Image tpl = make_marker(marker);
  Image base = scene.to_rgb();
  std::vector<double> px(base.data().begin(), base.data().end());
  const int x0 = static_cast<int>(std::lround(cx - 0.5 * marker.side));
  const int y0 = static_cast<int>(std::lround(cy - 0.5 * marker.side));
  for (int y = 0; y < marker.side; ++y) {
    for (int x = 0; x < marker.side; ++x) {
      const int sx = x0 + x, sy = y0 + y;
      if (sx < 0 || sy < 0 || sx >= base.width() || sy >= base.height()) continue;
      for (int c = 0; c < 3; ++c) px[(static_cast<std::size_t>(sy) * base.width() + sx) * 3 + c] = tpl.at(y, x, c);
    }
  }
  return Image(base.height(), base.width(), 3, std::move(px));
}

std::vector<std::vector<NamedImage>> make_prototype_images(const synth::World& world, int per_class, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<NamedImage>> out(world.classes.size());
  for (std::size_t c = 0; c < world.classes.size(); ++c) {
    for (int i = 0; i < per_class; ++i) {
      auto sc = synth::render_prototype(world, static_cast<ClassId>(c), rng);
      out[c].push_back(NamedImage{fmt::format("{}_{:02d}", world.classes[c].name, i), std::move(sc.image)});
    }
  }
  return out;
}

namespace {

std::string scenario_of(const synth::InstancePose& pose) { return pose.brightness < 0.975 ? "dim" : "bright"; }

}  // namespace

Corpus make_corpus(const CorpusConfig& cfg) {
  if (cfg.n_classes < 2) throw ConfigError("corpus needs at least two classes");
  Corpus corpus;
  corpus.config = cfg;
  corpus.world = synth::make_world(cfg.n_classes, cfg.seed);
  corpus.model = mock_config_for_world(corpus.world, cfg.hijack_class);
  corpus.prototype_images = make_prototype_images(corpus.world, cfg.prototypes_per_class, cfg.seed + 1);

  std::mt19937_64 rng(cfg.seed + 2);
  for (int i = 0; i < cfg.n_benign; ++i) {
    const ClassId c = static_cast<ClassId>(i % cfg.n_classes);
    const auto pose = synth::random_pose(corpus.world, rng, cfg.width, cfg.height);
    auto sc = synth::render(corpus.world, c, pose, cfg.width, cfg.height);
    corpus.scenes.push_back(LabeledScene{fmt::format("benign_{:03d}", i), std::move(sc.image), sc.annotation, false,
                                         scenario_of(pose)});
  }
  // patched scenes never show the hijack class itself, so every marker is an illusion attack
  int drawn = 0;
  for (int i = 0; drawn < cfg.n_patched; ++i) {
    const ClassId c = static_cast<ClassId>(i % cfg.n_classes);
    if (c == cfg.hijack_class) continue;
    const auto pose = synth::random_pose(corpus.world, rng, cfg.width, cfg.height);
    auto sc = synth::render(corpus.world, c, pose, cfg.width, cfg.height);
    Image patched = paste_marker(sc.image, corpus.model.marker, pose.cx, pose.cy);
    corpus.scenes.push_back(LabeledScene{fmt::format("patched_{:03d}", drawn), std::move(patched), sc.annotation,
                                         true, scenario_of(pose)});
    ++drawn;
  }
  return corpus;
}

LabeledScene make_veto_scene(const Corpus& corpus, ClassId hue_class, std::uint64_t seed) {
  const ClassId hijack = corpus.model.hijack_class;
  if (hue_class == hijack) throw ConfigError("veto scene needs a hue class other than the hijack class");
  std::mt19937_64 rng(seed);
  const auto pose = synth::random_pose(corpus.world, rng, corpus.config.width, corpus.config.height);
  auto sc = synth::render(corpus.world, hue_class, pose, corpus.config.width, corpus.config.height, hijack);
  Image patched = paste_marker(sc.image, corpus.model.marker, pose.cx, pose.cy);
  Annotation ann = sc.annotation;
  ann.label_id = hijack;
  ann.label_name = corpus.world.registry.name(hijack);
  return LabeledScene{fmt::format("veto_{}", hue_class), std::move(patched), ann, false, "veto"};
}

SceneManifest write_corpus(const Corpus& corpus, const fs::path& dir) {
  fs::create_directories(dir / "scenes");
  SceneManifest m;
  m.schema = ManifestSchema::coco_like;
  m.classes = corpus.world.registry;
  for (const auto& s : corpus.scenes) {
    const fs::path img = dir / "scenes" / (s.id + ".png");
    write_png(s.image, img);
    ManifestEntry e;
    e.image_id = s.id;
    e.image_path = img;
    e.dims = ImageDims{s.image.width(), s.image.height()};
    e.annotation = s.annotation;
    e.is_adversarial = s.is_adversarial;
    if (s.is_adversarial) e.attack_id = "marker";
    e.scenario = s.scenario;
    m.entries.push_back(std::move(e));
  }
  write_manifest(m, dir / "manifest.json");
  for (std::size_t c = 0; c < corpus.prototype_images.size(); ++c) {
    const fs::path cls = dir / "prototypes" / corpus.world.registry.name(static_cast<ClassId>(c));
    fs::create_directories(cls);
    for (const auto& p : corpus.prototype_images[c]) write_png(p.image, cls / (p.name + ".png"));
  }
  nlohmann::json model = corpus.model;
  model["type"] = "mock_marker";
  std::ofstream out(dir / "model.json");
  out << model.dump(1) << '\n';
  if (!out) throw IoError(fmt::format("failed writing '{}'", (dir / "model.json").string()));
  return m;
}

}  // namespace xdetect::corpus
