#include <filesystem>

#include "doctest.h"
#include "xdetect/corpus.hpp"
#include "xdetect/ensemble.hpp"
#include "xdetect/imaging.hpp"

using namespace xdetect;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  corpus::Corpus cp;
  PrototypeLibrary lib;
  std::unique_ptr<MockMarkerModel> model;
  DetectorConfig cfg;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    corpus::CorpusConfig cc;
    cc.n_classes = 6;
    cc.prototypes_per_class = 5;
    cc.n_benign = 6;
    cc.n_patched = 6;
    cc.seed = 3;
    cc.hijack_class = 2;
    x.cp = corpus::make_corpus(cc);
    x.lib = build_prototype_library(x.cp.world.registry, x.cp.prototype_images, 5, ExtractorSpec{}, sift::SiftParams{});
    x.model = std::make_unique<MockMarkerModel>(x.cp.model);
    x.cfg.oed.k = 5;
    x.cfg.transforms = default_transform_set(Space::digital);
    return x;
  }();
  return f;
}

ClassDistribution dist(std::vector<double> v) { return ClassDistribution(std::move(v)); }

}  // namespace

TEST_SUITE("ensemble") {

TEST_CASE("alert rule") {
  CHECK_FALSE(decide_alert(std::nullopt, 3));
  CHECK_FALSE(decide_alert(3, 3));
  CHECK(decide_alert(2, 3));
}

TEST_CASE("majority vote sums distributions") {
  const auto both = mv_ensemble(dist({0.6, 0.4}), dist({0.1, 0.9}));
  CHECK(both.class_id == 1);
  CHECK((*both.distribution)[1] == doctest::Approx(0.65));
  CHECK(mv_ensemble(dist({0.5, 0.5}), dist({0.5, 0.5})).class_id == 0);
  CHECK(mv_ensemble(dist({0.2, 0.8}), std::nullopt).class_id == 1);
  CHECK(mv_ensemble(std::nullopt, dist({0.7, 0.3})).class_id == 0);
  CHECK_FALSE(mv_ensemble(std::nullopt, std::nullopt).class_id.has_value());
  CHECK_FALSE(mv_ensemble(dist({0.0, 0.0}), std::nullopt).class_id.has_value());
}

TEST_CASE("mode names") {
  for (auto m : kAllModes) CHECK(parse_detector_mode(to_string(m)) == m);
  CHECK_THROWS_AS(parse_detector_mode("voting"), ConfigError);
}

TEST_CASE("two-tier skips the prototype stage when the transforms agree") {
  const auto& f = fixture();
  for (const auto& s : f.cp.scenes) {
    if (s.is_adversarial) continue;
    const auto out = f.model->predict(s.image);
    REQUIRE(out.has_value());
    const Verdict v = two_tier(s.image, *out, *f.model, f.lib, f.cfg);
    CHECK_FALSE(v.alert);
    CHECK(v.explanation.spd_run);
    CHECK_FALSE(v.explanation.oed_run);
    CHECK(v.explanation.prototype_votes.empty());
    CHECK(v.detector_class == out->class_id);
  }
}

TEST_CASE("two-tier flags marker scenes and names the true class") {
  const auto& f = fixture();
  int seen = 0;
  for (const auto& s : f.cp.scenes) {
    if (!s.is_adversarial) continue;
    const Verdict v = run_detector(s.image, *f.model, DetectorMode::two_tier, &f.lib, f.cfg);
    CHECK(v.alert);
    CHECK(v.target_class == f.cp.model.hijack_class);
    CHECK(v.explanation.oed_run);
    CHECK(v.detector_class == s.annotation.label_id);
    CHECK_FALSE(v.explanation.prototype_votes.empty());
    for (const auto& p : v.explanation.prototype_votes) CHECK(p.match_count > 0);
    CHECK(v.explanation.match_overlay.has_value());
    ++seen;
  }
  CHECK(seen == 6);
}

TEST_CASE("prototype stage vetoes a transform disagreement") {
  const auto& f = fixture();
  const auto veto = corpus::make_veto_scene(f.cp, 4, 77);
  const Verdict v = run_detector(veto.image, *f.model, DetectorMode::two_tier, &f.lib, f.cfg);
  CHECK(v.target_class == 2);
  CHECK(v.explanation.spd_class == 4);
  CHECK(v.explanation.oed_run);
  CHECK(v.explanation.oed_class == 2);
  CHECK_FALSE(v.alert);
  CHECK_FALSE(v.explanation.match_overlay.has_value());
  // the transform stage alone raises an alert on the same scene
  CHECK(run_detector(veto.image, *f.model, DetectorMode::spd_only, nullptr, f.cfg).alert);
}

TEST_CASE("run_detector composes the stages per mode") {
  const auto& f = fixture();
  const auto& s = f.cp.scenes.back();
  const auto out = f.model->predict(s.image);
  REQUIRE(out.has_value());

  const Verdict spd = run_detector(s.image, *f.model, DetectorMode::spd_only, nullptr, f.cfg);
  CHECK(spd.detector_class == spd_classify(s.image, *f.model, f.cfg.transforms).class_id);
  CHECK_FALSE(spd.explanation.oed_run);

  const Verdict oed = run_detector(s.image, *f.model, DetectorMode::oed_only, &f.lib, f.cfg);
  CHECK(oed.detector_class == oed_classify(s.image, *out, f.lib, f.cfg.oed).class_id);
  CHECK_FALSE(oed.explanation.spd_run);

  const Verdict mv = run_detector(s.image, *f.model, DetectorMode::mv, &f.lib, f.cfg);
  CHECK(mv.detector_class == mv_ensemble(mv.explanation.oed_votes, mv.explanation.spd_distribution).class_id);
  CHECK(mv.explanation.oed_run);
  CHECK(mv.explanation.spd_run);

  const Verdict tt = run_detector(s.image, *f.model, DetectorMode::two_tier, &f.lib, f.cfg);
  const Verdict direct = two_tier(s.image, *out, *f.model, f.lib, f.cfg);
  CHECK(tt.detector_class == direct.detector_class);
  CHECK(tt.alert == direct.alert);

  for (const Verdict* v : {&spd, &oed, &mv, &tt}) {
    CHECK(v->latency_s > 0.0);
    CHECK(v->alert == decide_alert(v->detector_class, v->target_class));
  }
  CHECK(mv.mode == DetectorMode::mv);

  CHECK_THROWS_AS(run_detector(s.image, *f.model, DetectorMode::oed_only, nullptr, f.cfg), PredictionError);
  CHECK_THROWS_AS(run_detector(Image(192, 256, 3, 0.1), *f.model, DetectorMode::spd_only, nullptr, f.cfg),
                  PredictionError);
}

TEST_CASE("verdict json and explanation files") {
  const auto& f = fixture();
  const auto& s = f.cp.scenes.back();
  Verdict v = run_detector(s.image, *f.model, DetectorMode::two_tier, &f.lib, f.cfg);
  REQUIRE(v.alert);
  const fs::path dir = fs::temp_directory_path() / "xdetect_explain_test";
  fs::remove_all(dir);
  write_explanation(v, dir, "scene");
  REQUIRE(v.explanation_paths.size() == 1);
  CHECK(fs::exists(dir / "scene_matches.png"));
  const auto dims = read_png_dims(dir / "scene_matches.png");
  CHECK(dims.width == v.explanation.match_overlay->width());

  const auto j = verdict_to_json(v, &f.cp.world.registry);
  for (const char* key : {"alert", "target_class", "detector_class", "mode", "latency_s", "explanation_paths"}) {
    CHECK(j.contains(key));
  }
  CHECK(j["mode"] == "two_tier");
  CHECK(j["explanation"]["per_transform_table"].size() == f.cfg.transforms.size());
  CHECK(j["explanation"]["prototype_votes"].size() == v.explanation.prototype_votes.size());
  CHECK(j["explanation"]["target_name"] == f.cp.world.registry.name(v.target_class));

  Verdict quiet = run_detector(f.cp.scenes.front().image, *f.model, DetectorMode::two_tier, &f.lib, f.cfg);
  write_explanation(quiet, dir, "quiet");
  CHECK(quiet.explanation_paths.empty());
  CHECK_FALSE(verdict_to_json(quiet)["explanation"].contains("prototype_votes"));
  fs::remove_all(dir);
}

}  // TEST_SUITE
