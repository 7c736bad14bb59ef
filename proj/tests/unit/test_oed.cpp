#include <algorithm>
#include <filesystem>
#include <fmt/core.h>
#include <random>

#include "doctest.h"
#include "xdetect/corpus.hpp"
#include "xdetect/imaging.hpp"
#include "xdetect/oed.hpp"

using namespace xdetect;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  synth::World world;
  std::vector<std::vector<NamedImage>> images;
  PrototypeLibrary lib;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.world = synth::make_world(5, 21);
    x.images = corpus::make_prototype_images(x.world, 5, 22);
    x.lib = build_prototype_library(x.world.registry, x.images, 5, ExtractorSpec{}, sift::SiftParams{});
    return x;
  }();
  return f;
}

PrototypeScore score(const std::string& id, ClassId c, std::size_t n) { return PrototypeScore{id, c, n}; }

}  // namespace

TEST_SUITE("oed") {

TEST_CASE("library shape and ids") {
  const auto& f = fixture();
  CHECK(f.lib.size() == 25);
  CHECK(f.lib.n_per_class() == 5);
  CHECK(f.lib.entries().front().prototype_id == "000-000");
  CHECK(f.lib.find("004-004") != nullptr);
  CHECK(f.lib.find("004-004")->class_id == 4);
  CHECK(f.lib.find("009-000") == nullptr);
  for (const auto& e : f.lib.entries()) CHECK_FALSE(e.descriptors.empty());
}

TEST_CASE("library build errors name the culprit") {
  const auto& f = fixture();
  auto short_class = f.images;
  short_class[2].resize(3);
  CHECK_THROWS_WITH(build_prototype_library(f.world.registry, short_class, 5, ExtractorSpec{}, sift::SiftParams{}),
                    doctest::Contains(f.world.registry.name(2).c_str()));
  auto blank = f.images;
  blank[1][0] = NamedImage{"blank_one", Image(136, 136, 3, 0.1)};
  CHECK_THROWS_WITH(build_prototype_library(f.world.registry, blank, 5, ExtractorSpec{}, sift::SiftParams{}),
                    doctest::Contains("blank_one"));
}

TEST_CASE("singleton library classifies its own image") {
  const auto& f = fixture();
  const ClassRegistry one({"only"});
  const std::vector<std::vector<NamedImage>> imgs{{f.images[0][0]}};
  const auto lib = build_prototype_library(one, imgs, 1, ExtractorSpec{}, sift::SiftParams{});
  REQUIRE(lib.size() == 1);
  const Image& img = f.images[0][0].image;
  const ModelOutput mo{{0, 0, static_cast<double>(img.width()), static_cast<double>(img.height())}, 0, 1.0, {}};
  OedConfig cfg;
  cfg.k = 1;
  const auto r = oed_classify(img, mo, lib, cfg);
  REQUIRE(r.class_id.has_value());
  CHECK(*r.class_id == 0);
}

TEST_CASE("scores equal a per-prototype re-computation") {
  const auto& f = fixture();
  const auto& proto_img = f.images[3][1].image;
  const Extraction ex = extract_object_detailed(
      proto_img, {0, 0, static_cast<double>(proto_img.width()), static_cast<double>(proto_img.height())},
      f.lib.extractor());
  const auto scores = score_prototypes(ex.image, f.lib);
  REQUIRE(scores.size() == f.lib.size());
  for (const auto& s : scores) {
    const auto* e = f.lib.find(s.prototype_id);
    REQUIRE(e != nullptr);
    CHECK(s.class_id == e->class_id);
    CHECK(s.match_count == sift::match_count(ex.image, e->image, f.lib.sift_params()));
  }
  // the query is prototype 003-001 itself
  CHECK(scores.front().prototype_id == "003-001");
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const auto& a = scores[i - 1];
    const auto& b = scores[i];
    CHECK((a.match_count > b.match_count || (a.match_count == b.match_count && a.prototype_id < b.prototype_id)));
  }
  for (const auto& s : score_prototypes(Image(80, 80, 3, 0.4), f.lib)) CHECK(s.match_count == 0);
}

TEST_CASE("knn voting") {
  const std::vector<PrototypeScore> top{score("a1", 0, 50), score("a2", 0, 40), score("b1", 1, 39), score("a3", 0, 38),
                                        score("b2", 1, 30), score("a4", 0, 20), score("c1", 2, 10), score("c2", 2, 1)};
  const auto r = prototype_knn_classify(top, 7, 3);
  CHECK(r.class_id == 0);
  CHECK(r.votes[0] == doctest::Approx(4.0 / 7));
  CHECK(r.votes[1] == doctest::Approx(2.0 / 7));
  CHECK(r.votes[2] == doctest::Approx(1.0 / 7));
  CHECK(r.neighbours.size() == 7);

  // vote tie: summed matches decide
  const std::vector<PrototypeScore> tie{score("a1", 0, 50), score("b1", 1, 40), score("a2", 0, 40), score("b2", 1, 30),
                                        score("a3", 0, 30), score("b3", 1, 20), score("c1", 2, 5)};
  CHECK(prototype_knn_classify(tie, 7, 3).class_id == 0);  // 120 vs 90
  const std::vector<PrototypeScore> tie_b{score("a1", 0, 10), score("b1", 1, 50), score("a2", 0, 10),
                                          score("b2", 1, 40), score("a3", 0, 10), score("b3", 1, 30), score("c1", 2, 5)};
  CHECK(prototype_knn_classify(tie_b, 7, 3).class_id == 1);
  // full tie: lowest class id
  const std::vector<PrototypeScore> flat{score("x", 1, 5), score("y", 0, 5)};
  CHECK(prototype_knn_classify(flat, 2, 2).class_id == 0);

  // prototypes without a single match do not vote
  const std::vector<PrototypeScore> sparse{score("d1", 3, 2), score("a1", 0, 0), score("a2", 0, 0), score("a3", 0, 0),
                                           score("a4", 0, 0)};
  const auto sp = prototype_knn_classify(sparse, 5, 4);
  CHECK(sp.class_id == 3);
  CHECK(sp.votes[3] == 1.0);
  CHECK(sp.neighbours.size() == 1);

  // k=1 is the single best prototype; k beyond the list is clamped
  CHECK(prototype_knn_classify(top, 1, 3).class_id == 0);
  const auto clamped = prototype_knn_classify(top, 50, 3);
  CHECK(clamped.neighbours.size() == top.size());
  CHECK(clamped.votes.sum() == doctest::Approx(1.0));
}

TEST_CASE("knn is invariant to score order") {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> cls(0, 3), cnt(0, 12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<PrototypeScore> s;
    for (int i = 0; i < 20; ++i) s.push_back(score(fmt::format("{:03d}", i), cls(rng), cnt(rng)));
    const auto ref = prototype_knn_classify(s, 7, 4);
    std::shuffle(s.begin(), s.end(), rng);
    const auto got = prototype_knn_classify(s, 7, 4);
    CHECK(got.class_id == ref.class_id);
    CHECK(got.votes == ref.votes);
    // in a vote tie the winner is still one of the top-voted classes
    const double top_vote = *std::max_element(ref.votes.mass().begin(), ref.votes.mass().end());
    CHECK(ref.votes[static_cast<std::size_t>(ref.class_id)] == top_vote);
  }
}

TEST_CASE("oed_classify is the composition of its stages") {
  const auto& f = fixture();
  std::mt19937_64 rng(31);
  OedConfig cfg;
  cfg.k = 3;
  for (ClassId c = 0; c < 5; ++c) {
    const auto pose = synth::random_pose(f.world, rng, 256, 192);
    const auto sc = synth::render(f.world, c, pose, 256, 192);
    const ModelOutput mo{sc.annotation.bbox, c, 1.0, {}};
    const auto r = oed_classify(sc.image, mo, f.lib, cfg);
    const auto manual = prototype_knn_classify(
        score_prototypes(extract_object(sc.image, mo, cfg.extractor), f.lib), cfg.k, f.lib.classes().size());
    REQUIRE(r.class_id.has_value());
    CHECK(*r.class_id == manual.class_id);
    CHECK(*r.votes == manual.votes);
    CHECK(*r.class_id == c);
  }
}

TEST_CASE("a textured decal on a quarter of the object does not flip the class") {
  const auto& f = fixture();
  std::mt19937_64 rng(41);
  OedConfig cfg;
  cfg.k = 5;
  int correct = 0;
  for (int i = 0; i < 10; ++i) {
    const ClassId c = i % 5;
    const auto pose = synth::random_pose(f.world, rng, 256, 192);
    const auto sc = synth::render(f.world, c, pose, 256, 192);
    const BBox& b = sc.annotation.bbox;
    const int side = static_cast<int>(0.5 * std::min(b.width(), b.height()));  // <= 25% of the box area
    const Image decal = synth::add_decal(sc.image, static_cast<int>(b.center_x()), static_cast<int>(b.center_y()),
                                         side, 100 + i);
    const auto r = oed_classify(decal, ModelOutput{b, c, 1.0, {}}, f.lib, cfg);
    correct += r.class_id == c;
  }
  CHECK(correct == 10);
}

TEST_CASE("no descriptors means inconclusive") {
  const auto& f = fixture();
  ExtractorSpec crop;
  crop.method = ExtractionMethod::bbox_crop;
  OedConfig cfg;
  cfg.extractor = crop;
  const auto r = oed_classify(Image(100, 100, 3, 0.5), ModelOutput{{10, 10, 90, 90}, 1, 1.0, {}}, f.lib, cfg);
  CHECK(r.inconclusive());
  CHECK_FALSE(r.note.empty());
}

TEST_CASE("save and load reproduce scores exactly") {
  const auto& f = fixture();
  const fs::path dir = fs::temp_directory_path() / "xdetect_lib_test";
  fs::remove_all(dir);
  save_library(f.lib, dir);
  CHECK(fs::exists(dir / "index.json"));
  CHECK(fs::exists(dir / f.world.registry.name(0) / "000-000.png"));
  const auto back = load_library(dir);
  CHECK(back.size() == f.lib.size());
  CHECK(back.classes().names() == f.lib.classes().names());
  CHECK(back.sift_params() == f.lib.sift_params());
  CHECK(back.extractor() == f.lib.extractor());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back.entries()[i].descriptors == f.lib.entries()[i].descriptors);
  }
  std::mt19937_64 rng(5);
  for (ClassId c = 0; c < 5; ++c) {
    const auto sc = synth::render(f.world, c, synth::random_pose(f.world, rng, 256, 192), 256, 192);
    const Image q = extract_object(sc.image, ModelOutput{sc.annotation.bbox, c, 1.0, {}}, ExtractorSpec{});
    CHECK(score_prototypes(q, back) == score_prototypes(q, f.lib));
  }
  fs::remove_all(dir);
  CHECK_THROWS(load_library(dir));
}

TEST_CASE("descriptor encoding round trip") {
  const auto& d = fixture().lib.entries()[0].descriptors;
  CHECK(decode_descriptors(encode_descriptors(d)) == d);
  CHECK_THROWS(decode_descriptors("not base64 !!"));
}

TEST_CASE("match overlay") {
  const auto& f = fixture();
  const auto& e = f.lib.entries()[0];
  const auto feats = sift::extract_features(e.image, f.lib.sift_params());
  const Image ov = render_match_overlay(e.image, feats, e, 0.8);
  CHECK(ov.channels() == 3);
  CHECK(ov.width() >= 2 * e.image.width());
}

}  // TEST_SUITE
