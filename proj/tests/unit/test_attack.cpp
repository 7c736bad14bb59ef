#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "xdetect/attack.hpp"
#include "xdetect/imaging.hpp"
#include "xdetect/synthetic.hpp"

using namespace xdetect;
namespace fs = std::filesystem;

namespace {

// sum (p - t)^2 over all pixels
class Quadratic final : public PatchObjective {
 public:
  explicit Quadratic(double t) : t_(t) {}
  double value(const Patch& p) const override {
    double s = 0;
    for (double v : p.image().data()) s += (v - t_) * (v - t_);
    return s;
  }
  Raster gradient(const Patch& p) const override {
    Raster g(p.side(), p.side(), p.image().channels());
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = 2 * (p.image().data()[i] - t_);
    return g;
  }

 private:
  double t_;
};

std::vector<AttackScene> toy_scenes(int n) {
  std::vector<AttackScene> out;
  for (int i = 0; i < n; ++i) {
    out.push_back({synth::textured_image(128, 96, 50 + i).to_rgb(), BBox{24, 16, 104, 80}});
  }
  return out;
}

const ToyDifferentiableModel& toy() {
  static const ToyDifferentiableModel m(random_toy_config({"a", "b", "c", "d"}, 7, 0.3));
  return m;
}

AttackConfig small_config() {
  AttackConfig c;
  c.iterations = 12;
  c.seed = 5;
  c.eot_samples = 4;
  c.target_class = 1;
  c.patch_side = 64;
  return c;
}

Patch random_patch(int side, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(side) * side * 3);
  for (double& x : v) x = u(rng);
  return Patch(Image(side, side, 3, std::move(v)));
}

double box_iou(const BBox& a, const BBox& b) {
  const double w = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double h = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = w * h;
  return inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter);
}

}  // namespace

TEST_SUITE("attack") {

TEST_CASE("native placement pastes the patch verbatim") {
  const Image scene = synth::textured_image(100, 80, 3).to_rgb();
  const Patch patch = random_patch(20, 1, 0.0, 1.0);
  const BBox box{20, 10, 80, 70};
  PlacementSpec p;
  const auto comp = composite_patch(scene, patch, box, p, PlacementDraw{});
  const int x0 = static_cast<int>(std::lround(50 - 10.0));
  const int y0 = static_cast<int>(std::lround(40 - 10.0));
  for (int y = 0; y < 80; ++y) {
    for (int x = 0; x < 100; ++x) {
      const bool inside = x >= x0 && x < x0 + 20 && y >= y0 && y < y0 + 20;
      for (int c = 0; c < 3; ++c) {
        CHECK(comp.image.at(y, x, c) == (inside ? patch.image().at(y - y0, x - x0, c) : scene.at(y, x, c)));
      }
    }
  }
  CHECK_THROWS_AS(Patch(Image(10, 12, 3, 0.5)), ValidationError);
  CHECK_THROWS_AS(Patch::filled(4, 3, 0.5), ValidationError);
}

TEST_CASE("brightness multiplies the pasted pixels") {
  const Image scene(60, 60, 3, 0.1);
  const Image out = apply_patch(scene, Patch::filled(10, 3, 0.5), {10, 10, 50, 50}, PlacementSpec{}, PlacementDraw{0, 1.6});
  CHECK(out.at(30, 30, 0) == doctest::Approx(0.8));
  CHECK(out.at(0, 0, 0) == 0.1);
  const Image hot = apply_patch(scene, Patch::filled(10, 3, 0.9), {10, 10, 50, 50}, PlacementSpec{}, PlacementDraw{0, 1.6});
  CHECK(hot.at(30, 30, 1) == 1.0);
}

TEST_CASE("placement draws are deterministic and in range") {
  PlacementSpec p;
  std::mt19937_64 a(3), b(3);
  for (int i = 0; i < 100; ++i) {
    const auto da = sample_placement(p, a);
    const auto db = sample_placement(p, b);
    CHECK(da.rotation_deg == db.rotation_deg);
    CHECK(da.brightness == db.brightness);
    CHECK(da.rotation_deg >= -20.0);
    CHECK(da.rotation_deg <= 20.0);
    CHECK(da.brightness >= 0.8);
    CHECK(da.brightness <= 1.6);
  }
  const Image scene = synth::textured_image(90, 90, 2).to_rgb();
  std::mt19937_64 r1(11), r2(11);
  const Patch patch = random_patch(16, 2, 0, 1);
  CHECK(apply_patch(scene, patch, {10, 10, 80, 80}, p, r1) == apply_patch(scene, patch, {10, 10, 80, 80}, p, r2));
  p.brightness_min = 2.0;
  CHECK_THROWS_AS(validate_placement(p), ConfigError);
}

TEST_CASE("sign step on a quadratic surrogate") {
  const Quadratic q(1.0);
  const Patch p = lk_patch_step(Patch::filled(8, 3, 0.5), q, 0.1);
  for (double v : p.image().data()) CHECK(v == doctest::Approx(0.6));
  // a huge step is still clipped into range
  const Patch up = lk_patch_step(Patch::filled(8, 3, 0.5), q, 5.0);
  for (double v : up.image().data()) CHECK(v == 1.0);
  const Patch down = lk_patch_step(Patch::filled(8, 3, 0.5), Quadratic(-3.0), 5.0);
  for (double v : down.image().data()) CHECK(v == 0.0);
  // zero gradient leaves the patch alone
  const Patch at_target = Patch::filled(8, 3, 0.25);
  CHECK(lk_patch_step(at_target, Quadratic(0.25), 0.1).image() == at_target.image());
  CHECK(lk_update(at_target, Raster(8, 8, 3, 0.0), 0.3).image() == at_target.image());
}

TEST_CASE("sign steps converge to the surrogate's minimum") {
  const double target = 0.73, eps = 0.1;
  const Quadratic q(target);
  Patch p = Patch::filled(8, 3, 0.0);
  const int steps = static_cast<int>(std::ceil(target / eps));
  for (int i = 0; i < steps; ++i) p = lk_patch_step(p, q, eps);
  for (double v : p.image().data()) CHECK(std::abs(v - target) <= eps);
  double last = q.value(p);
  for (int i = 0; i < 10; ++i) {
    p = lk_patch_step(p, q, eps);
    CHECK(q.value(p) <= std::max(last, 8 * 8 * 3 * eps * eps));
    last = q.value(p);
  }
}

TEST_CASE("patch gradient matches finite differences through placement and transforms") {
  const auto scenes = toy_scenes(2);
  const Patch patch = random_patch(32, 4, 0.3, 0.6);
  PlacementSpec placement;
  const std::vector<EotSample> samples{
      {0, PlacementDraw{12.0, 1.2}, TransformSpec{TransformKind::blur, 3, std::nullopt}},
      {1, PlacementDraw{-7.0, 0.9}, TransformSpec{TransformKind::darken, 0.1, std::nullopt}},
      {1, PlacementDraw{0.0, 1.0}, std::nullopt}};
  const auto ev = evaluate_eot(patch, scenes, toy(), 2, placement, samples);
  REQUIRE(ev.gradient.data.size() == patch.image().size());
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::size_t> pick(0, patch.image().size() - 1);
  int nonzero = 0;
  for (int k = 0; k < 40; ++k) {
    const std::size_t i = pick(rng);
    std::vector<double> up(patch.image().data().begin(), patch.image().data().end()), down = up;
    const double h = 1e-4;
    up[i] += h;
    down[i] -= h;
    const double lp = evaluate_eot(Patch(Image(32, 32, 3, up)), scenes, toy(), 2, placement, samples).loss;
    const double lm = evaluate_eot(Patch(Image(32, 32, 3, down)), scenes, toy(), 2, placement, samples).loss;
    const double num = (lp - lm) / (2 * h);
    CHECK(ev.gradient.data[i] == doctest::Approx(num).epsilon(1e-4).scale(1e-9));
    nonzero += ev.gradient.data[i] != 0.0;
  }
  CHECK(nonzero > 0);
  CHECK(ev.target_prob > 0.0);
  CHECK(ev.target_prob < 1.0);
}

TEST_CASE("a small step lowers the loss on frozen samples") {
  const auto scenes = toy_scenes(3);
  PlacementSpec placement;
  std::mt19937_64 rng(21);
  const auto samples = draw_eot_samples(scenes.size(), placement, {}, 6, rng);
  const Patch p0 = Patch::filled(64, 3, 0.5);
  const auto before = evaluate_eot(p0, scenes, toy(), 1, placement, samples);
  const Patch p1 = lk_update(p0, before.gradient, 0.002);
  CHECK(evaluate_eot(p1, scenes, toy(), 1, placement, samples).loss < before.loss);
}

TEST_CASE("crafting is reproducible and raises the target probability") {
  const auto scenes = toy_scenes(3);
  const AttackConfig cfg = small_config();
  const auto a = craft_patch(cfg, scenes, toy());
  const auto b = craft_patch(cfg, scenes, toy());
  CHECK_FALSE(a.diverged);
  REQUIRE(a.trace.size() == static_cast<std::size_t>(cfg.iterations + 1));
  CHECK(trace_to_csv(a.trace) == trace_to_csv(b.trace));
  CHECK(a.patch.image() == b.patch.image());
  CHECK(a.trace.back().target_prob > a.trace.front().target_prob);
  AttackConfig other = cfg;
  other.seed = 6;
  CHECK(trace_to_csv(craft_patch(other, scenes, toy()).trace) != trace_to_csv(a.trace));
  CHECK(trace_to_csv(a.trace).rfind("iteration,loss,target_prob,oe_penalty,eot_samples\n", 0) == 0);
}

TEST_CASE("scene-processing crafting samples transforms") {
  const auto scenes = toy_scenes(2);
  AttackConfig sp = small_config();
  sp.iterations = 4;
  sp.adaptive_mode = AdaptiveMode::scene_processing;
  sp.sp_transforms = adaptive_sp_transforms(Space::physical, true, 3);
  const auto r = craft_patch(sp, scenes, toy());
  // every sample carries a transform after its scene/rotation/brightness fields
  const auto& row = r.trace.front().eot_samples;
  CHECK(std::count(row.begin(), row.end(), '/') == 3 * sp.eot_samples);

  AttackConfig ens = sp;
  ens.adaptive_mode = AdaptiveMode::ensemble;
  ens.lambda_oe = 0.0;
  const auto e = craft_patch(ens, scenes, toy());
  CHECK(trace_to_csv(e.trace) == trace_to_csv(r.trace));
  CHECK(e.patch.image() == r.patch.image());
}

TEST_CASE("relaxed transform presets") {
  const auto strict = adaptive_sp_transforms(Space::physical, false, 1);
  const auto relaxed = adaptive_sp_transforms(Space::physical, true, 1);
  CHECK(strict[0].strength == 12);
  CHECK(relaxed[0].strength == 1);
  CHECK(strict.back().strength == 0.35);
  CHECK(relaxed.back().strength == 0.25);
  CHECK(adaptive_sp_transforms(Space::digital, false)[0].strength == 6);
}

TEST_CASE("oe penalty range") {
  const Image obj = synth::textured_image(96, 96, 8).to_rgb();
  const sift::SiftParams sp;
  PrototypeEntry proto;
  proto.prototype_id = "000-000";
  proto.image = obj;
  const auto feats = sift::extract_features(obj, sp);
  proto.keypoints = feats.keypoints;
  proto.descriptors = feats.descriptors;
  REQUIRE_FALSE(proto.descriptors.empty());
  ExtractorSpec crop;
  crop.method = ExtractionMethod::bbox_crop;
  crop.padding = 0.0;
  const BBox full{0, 0, 96, 96};

  const auto self = oe_sift_penalty(obj, full, crop, proto, sp);
  CHECK(self.value == -1.0);
  const auto flat = oe_sift_penalty(Image(96, 96, 3, 0.5), full, crop, proto, sp);
  CHECK(flat.value == 0.0);
  CHECK(flat.matches == 0u);

  for (double alpha : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    std::vector<double> v(obj.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = alpha * obj.data()[i] + (1 - alpha) * 0.5;
    const auto pen = oe_sift_penalty(Image(96, 96, 3, std::move(v)), full, crop, proto, sp);
    CHECK(pen.value >= -1.0);
    CHECK(pen.value <= 0.0);
  }
  const auto failed = oe_sift_penalty(Image(96, 96, 3, 0.5), full, ExtractorSpec{}, proto, sp);
  CHECK(failed.extraction_failed);
  CHECK(failed.value == 0.0);
  PrototypeEntry empty;
  CHECK_THROWS_AS(oe_sift_penalty(obj, full, crop, empty, sp), ValidationError);
}

TEST_CASE("oe crafting records the penalty") {
  const auto scenes = toy_scenes(1);
  const Image obj = scenes[0].image.crop(24, 16, 104, 80);
  PrototypeEntry proto;
  proto.image = obj;
  proto.descriptors = sift::extract_features(obj, sift::SiftParams{}).descriptors;
  REQUIRE_FALSE(proto.descriptors.empty());
  OeContext ctx;
  ctx.target_prototype = &proto;
  ctx.extractor.method = ExtractionMethod::bbox_crop;
  ctx.extractor.padding = 0.0;
  AttackConfig cfg = small_config();
  cfg.iterations = 2;
  cfg.patch_side = 12;
  cfg.placement.anchor_x = 0.1;
  cfg.placement.anchor_y = 0.1;
  cfg.adaptive_mode = AdaptiveMode::oe_sift;
  cfg.lambda_oe = 1.0;
  cfg.zo_samples = 2;
  const auto r = craft_patch(cfg, scenes, toy(), &ctx);
  CHECK_FALSE(r.diverged);
  CHECK(r.trace.front().oe_penalty < 0.0);
  CHECK(r.trace.front().oe_penalty >= -1.0);
  CHECK_THROWS_AS(craft_patch(cfg, scenes, toy()), ConfigError);
}

TEST_CASE("crafting preconditions") {
  const auto scenes = toy_scenes(1);
  AttackConfig cfg = small_config();
  CHECK_THROWS_AS(craft_patch(cfg, {}, toy()), ValidationError);
  cfg.target_class = 9;
  CHECK_THROWS_AS(craft_patch(cfg, scenes, toy()), ConfigError);
}

TEST_CASE("attack success cases") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0, 100);
  const std::set<ClassId> targets{2, 3};
  int hits = 0, misses = 0;
  for (int i = 0; i < 20; ++i) {
    const double x = u(rng), y = u(rng);
    const BBox benign_box{x, y, x + 50, y + 40};
    const double shift = (i % 4) * 12.0;  // 0, 12, 24, 36 px
    const BBox attacked_box{x + shift, y, x + shift + 50, y + 40};
    const ClassId cls = static_cast<ClassId>(i % 5);
    const ModelOutput benign{benign_box, 0, 0.9, std::nullopt};
    const std::optional<ModelOutput> attacked =
        i == 7 ? std::nullopt : std::optional<ModelOutput>(ModelOutput{attacked_box, cls, 0.8, std::nullopt});
    const bool expected = attacked && box_iou(benign_box, attacked_box) >= 0.5 && targets.count(cls);
    CHECK(attack_success(benign, attacked, targets) == expected);
    (expected ? hits : misses)++;
  }
  CHECK(hits > 0);
  CHECK(misses > 0);
  const ModelOutput b{{0, 0, 10, 10}, 0, 1, std::nullopt};
  const ModelOutput half{{0, 0, 10, 5}, 2, 1, std::nullopt};
  CHECK(attack_success(b, half, targets));
  CHECK_FALSE(attack_success(b, half, targets, 0.6));
}

TEST_CASE("config validation and hashing") {
  AttackConfig c = small_config();
  CHECK_NOTHROW(validate_attack_config(c));
  AttackConfig bad = c;
  bad.adaptive_mode = AdaptiveMode::oe_sift;
  bad.zo_samples = 0;
  CHECK_THROWS_AS(validate_attack_config(bad), ConfigError);
  bad = c;
  bad.adaptive_mode = AdaptiveMode::scene_processing;
  CHECK_THROWS_AS(validate_attack_config(bad), ConfigError);
  bad.sp_transforms = {TransformSpec{TransformKind::style_hook, 0, std::nullopt}};
  CHECK_THROWS_AS(validate_attack_config(bad), ConfigError);
  bad = c;
  bad.epsilon = 0;
  CHECK_THROWS_AS(validate_attack_config(bad), ConfigError);
  bad = c;
  bad.patch_side = 4;
  CHECK_THROWS_AS(validate_attack_config(bad), ConfigError);
  CHECK_THROWS_AS(parse_adaptive_mode("gradient_free"), ConfigError);

  const nlohmann::json j = c;
  const AttackConfig back = j.get<AttackConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(c).size() == 64);
  AttackConfig other = c;
  other.seed += 1;
  CHECK(config_hash(other) != config_hash(c));
}

TEST_CASE("patch files") {
  const auto scenes = toy_scenes(1);
  AttackConfig cfg = small_config();
  cfg.iterations = 2;
  const auto r = craft_patch(cfg, scenes, toy());
  const fs::path dir = fs::temp_directory_path() / "xdetect_patch_test";
  fs::remove_all(dir);
  save_patch(r, cfg, dir, "patch");
  CHECK(fs::exists(dir / "patch.png"));
  CHECK(fs::exists(dir / "patch_trace.csv"));
  std::ifstream js(dir / "patch.json");
  const auto side = nlohmann::json::parse(js);
  CHECK(side["side"] == 64);
  CHECK(side["config_hash"] == config_hash(cfg));
  CHECK(side["seed"] == cfg.seed);
  const Patch back = load_patch(dir / "patch.png");
  REQUIRE(back.side() == 64);
  for (std::size_t i = 0; i < back.image().size(); ++i) {
    CHECK(std::abs(back.image().data()[i] - r.patch.image().data()[i]) <= 0.5 / 255 + 1e-12);
  }
  fs::remove_all(dir);
}

}  // TEST_SUITE
