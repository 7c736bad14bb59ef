#include <random>

#include "doctest.h"
#include "support/oracles.hpp"
#include "xdetect/corpus.hpp"
#include "xdetect/imaging.hpp"
#include "xdetect/models.hpp"

using namespace xdetect;

namespace {

Image noisy_scene(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<double> v(static_cast<std::size_t>(h) * w * 3);
  for (double& x : v) x = u(rng);
  return Image(h, w, 3, std::move(v));
}

Image with_pixel(const Image& img, std::size_t index, double value) {
  std::vector<double> v(img.data().begin(), img.data().end());
  v[index] = value;
  return Image(img.height(), img.width(), img.channels(), std::move(v));
}

}  // namespace

TEST_SUITE("models") {

TEST_CASE("lift_to_distribution") {
  const ModelOutput a{{0, 0, 1, 1}, 0, 1.0, std::nullopt};
  const auto d1 = lift_to_distribution(a, 3);
  CHECK(d1[0] == 1.0);
  CHECK(d1[1] == 0.0);
  CHECK(d1[2] == 0.0);
  const ModelOutput b{{0, 0, 1, 1}, 0, 0.7, std::nullopt};
  const auto d2 = lift_to_distribution(b, 3);
  CHECK(d2[0] == doctest::Approx(0.7));
  CHECK(d2[1] == doctest::Approx(0.15));
  CHECK(d2[2] == doctest::Approx(0.15));
  CHECK(d2.sum() == doctest::Approx(1.0));
  for (double conf : {0.26, 0.4, 0.9}) {
    const ModelOutput o{{0, 0, 1, 1}, 2, conf, std::nullopt};
    CHECK(lift_to_distribution(o, 4).argmax() == 2);
  }
  CHECK_THROWS_AS(lift_to_distribution(a, 1), ValidationError);
  const ModelOutput bad{{0, 0, 1, 1}, 5, 0.5, std::nullopt};
  CHECK_THROWS_AS(lift_to_distribution(bad, 3), ValidationError);
}

TEST_CASE("model output json round trip") {
  const ModelOutput o{{1, 2, 30, 40}, 1, 0.8, ClassDistribution(std::vector<double>{0.2, 0.8})};
  const ModelOutput back = model_output_from_json(model_output_to_json(o));
  CHECK(back.bbox == o.bbox);
  CHECK(back.class_id == 1);
  CHECK(back.confidence == 0.8);
  CHECK(*back.distribution == *o.distribution);
}

TEST_CASE("mock marker model on synthetic scenes") {
  corpus::CorpusConfig cc;
  cc.n_classes = 8;
  const auto world = synth::make_world(cc.n_classes, 5);
  const MockMarkerModel model(corpus::mock_config_for_world(world, 3));
  CHECK(model.spec().has_distribution);
  CHECK_FALSE(model.spec().has_gradient);
  std::mt19937_64 rng(17);
  for (int i = 0; i < 16; ++i) {
    const ClassId c = static_cast<ClassId>(i % cc.n_classes);
    const auto pose = synth::random_pose(world, rng, 256, 192);
    const auto sc = synth::render(world, c, pose, 256, 192);
    const Image before = sc.image;
    const auto out = model.predict(sc.image);
    REQUIRE(out.has_value());
    CHECK(sc.image == before);
    CHECK(out->class_id == c);
    CHECK(out->distribution->sum() == doctest::Approx(1.0).epsilon(1e-9));
    const BBox& gt = sc.annotation.bbox;
    CHECK(std::abs(out->bbox.x1 - gt.x1) <= 5);
    CHECK(std::abs(out->bbox.y1 - gt.y1) <= 5);
    CHECK(std::abs(out->bbox.x2 - gt.x2) <= 5);
    CHECK(std::abs(out->bbox.y2 - gt.y2) <= 5);

    if (c == 3) continue;
    const Image patched = corpus::paste_marker(sc.image, model.config().marker, pose.cx, pose.cy);
    const auto hijacked = model.predict(patched);
    REQUIRE(hijacked.has_value());
    CHECK(hijacked->class_id == 3);
    CHECK(iou(hijacked->bbox, out->bbox) >= 0.8);

    // blur at the disruption kernel removes the trigger
    const auto blurred = model.predict(box_blur(patched, MockMarkerModelConfig::kDisruptionKernel));
    REQUIRE(blurred.has_value());
    CHECK(blurred->class_id == c);
  }
  CHECK_FALSE(model.predict(Image(100, 100, 3, 0.1)).has_value());
  CHECK_THROWS_AS(model.gradient(Image(100, 100, 3, 0.1), LossSpec{0}), CapabilityError);
}

TEST_CASE("mock marker config validation") {
  const auto world = synth::make_world(4, 1);
  auto cfg = corpus::mock_config_for_world(world, 0);
  cfg.hijack_class = 9;
  CHECK_THROWS_AS(MockMarkerModel{cfg}, ConfigError);
  cfg.hijack_class = 0;
  cfg.marker_detect_threshold = 1.5;
  CHECK_THROWS_AS(MockMarkerModel{cfg}, ConfigError);
  cfg.marker_detect_threshold = 0.02;
  nlohmann::json j = cfg;
  j["type"] = "mock_marker";
  CHECK(model_from_json(j)->spec().classes.size() == 4);
  j["type"] = "resnet";
  CHECK_THROWS_AS(model_from_json(j), ConfigError);
}

TEST_CASE("toy model probabilities form a distribution") {
  const ToyDifferentiableModel model(random_toy_config({"a", "b", "c", "d"}, 3, 1.0));
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Image scene = noisy_scene(48, 64, s);
    const auto p = model.probabilities(scene);
    double sum = 0;
    for (double v : p) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    const auto out = model.predict(scene);
    REQUIRE(out.has_value());
    CHECK(out->distribution->sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(out->bbox == BBox{0, 0, 64, 48});
  }
  CHECK_THROWS_AS(model.predict(Image(8, 8, 3, 0.5)), PredictionError);
}

TEST_CASE("toy gradient matches central finite differences") {
  const ToyDifferentiableModel model(random_toy_config({"a", "b", "c"}, 9, 1.0));
  std::mt19937_64 rng(4);
  for (ClassId target : {0, 1, 2}) {
    const Image scene = noisy_scene(40, 56, 10 + target);
    const Raster g = model.gradient(scene, LossSpec{target});
    REQUIRE(g.data.size() == scene.size());
    std::uniform_int_distribution<std::size_t> pick(0, scene.size() - 1);
    for (int k = 0; k < 100; ++k) {
      const std::size_t i = pick(rng);
      const double h = 1e-4, v = scene.data()[i];
      const double num = (model.loss(with_pixel(scene, i, v + h), LossSpec{target}) -
                          model.loss(with_pixel(scene, i, v - h), LossSpec{target})) /
                         (2 * h);
      CHECK(oracle::rel_err(g.data[i], num) < 1e-4);
    }
  }
}

TEST_CASE("toy gradient edge cases") {
  auto cfg = random_toy_config({"a", "b"}, 1, 1.0);
  const Image scene = noisy_scene(32, 32, 2);
  const ToyDifferentiableModel model(cfg);
  const Raster g0 = model.gradient(scene, LossSpec{0});
  const Raster g1 = model.gradient(scene, LossSpec{1});
  for (std::size_t i = 0; i < g0.data.size(); ++i) {
    if (g0.data[i] != 0.0) CHECK(std::signbit(g0.data[i]) != std::signbit(g1.data[i]));
  }
  std::fill(cfg.weights.begin(), cfg.weights.end(), 0.0);
  const ToyDifferentiableModel zero(cfg);
  for (double v : zero.gradient(scene, LossSpec{1}).data) CHECK(v == 0.0);
  CHECK_THROWS_AS(model.loss(scene, LossSpec{7}), ValidationError);
}

}  // TEST_SUITE
