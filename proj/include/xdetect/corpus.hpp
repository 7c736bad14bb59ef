#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xdetect/eval.hpp"
#include "xdetect/models.hpp"
#include "xdetect/oed.hpp"
#include "xdetect/synthetic.hpp"

// Ready-made synthetic benchmark: a world of textured classes, a mock marker
// model that names objects by hue, prototype views per class, and benign /
// marker-patched scenes with ground truth.
namespace xdetect::corpus {

struct CorpusConfig {
  int n_classes = 20;
  int prototypes_per_class = 10;
  int n_benign = 50;
  int n_patched = 50;
  int width = 256;
  int height = 192;
  std::uint64_t seed = 1;
  ClassId hijack_class = 0;
};

struct LabeledScene {
  std::string id;
  Image image;
  Annotation annotation;
  bool is_adversarial = false;
  std::string scenario;
};

struct Corpus {
  CorpusConfig config;
  synth::World world;
  MockMarkerModelConfig model;
  std::vector<std::vector<NamedImage>> prototype_images;  // per class
  std::vector<LabeledScene> scenes;                       // benign first, then patched
};

/// One hue rule per class, gated at half the hue spacing.
MockMarkerModelConfig mock_config_for_world(const synth::World& world, ClassId hijack_class);

/// Pastes the marker template, unrotated and at native size, centred at (cx, cy).
Image paste_marker(const Image& scene, const MarkerSpec& marker, double cx, double cy);

Corpus make_corpus(const CorpusConfig& cfg);

/// Prototype views only (no scenes), for library building.
std::vector<std::vector<NamedImage>> make_prototype_images(const synth::World& world, int per_class, std::uint64_t seed);

/// Scene whose texture belongs to the hijack class but whose hue belongs to
/// `hue_class`, carrying the marker: the model reports the hijack class, the
/// transformed scenes report `hue_class`, the prototypes report the hijack class.
LabeledScene make_veto_scene(const Corpus& corpus, ClassId hue_class, std::uint64_t seed);

/// Writes scenes/, prototypes/<class>/, manifest.json and model.json under `dir`.
SceneManifest write_corpus(const Corpus& corpus, const std::filesystem::path& dir);

}  // namespace xdetect::corpus
