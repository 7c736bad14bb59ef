#include <random>

#include "doctest.h"
#include "xdetect/core.hpp"

using namespace xdetect;

TEST_SUITE("core") {

TEST_CASE("image construction validates range and size") {
  CHECK_THROWS_AS(Image(0, 4, 1), ValidationError);
  CHECK_THROWS_AS(Image(2, 2, 2), ValidationError);
  CHECK_THROWS_AS(Image(2, 2, 1, 1.5), ValidationError);
  CHECK_THROWS_AS(Image(2, 2, 1, std::vector<double>{0, 0.5, 1.2, 0}), ValidationError);
  CHECK_THROWS_AS(Image(2, 2, 1, std::vector<double>{0, 0.5}), ValidationError);
  const Image c = Image::clipped(1, 3, 1, {-0.5, 0.5, std::nan("")});
  CHECK(c.at(0, 0) == 0.0);
  CHECK(c.at(0, 1) == 0.5);
  CHECK(c.at(0, 2) == 0.0);
}

TEST_CASE("luminance conversion") {
  const Image rgb(1, 1, 3, std::vector<double>{1.0, 0.0, 0.0});
  CHECK(rgb.to_gray().at(0, 0) == doctest::Approx(0.299));
  CHECK(rgb.to_gray().to_rgb().channels() == 3);
}

TEST_CASE("yolo to xyxy examples") {
  const ImageDims d{640, 360};
  CHECK(bbox_yolo_to_xyxy({0.5, 0.5, 1.0, 1.0}, d) == BBox{0, 0, 640, 360});
  CHECK(bbox_yolo_to_xyxy({0.5, 0.5, 0.25, 0.5}, d) == BBox{240, 90, 400, 270});
  const YoloBox y = bbox_xyxy_to_yolo({240, 90, 400, 270}, d);
  CHECK(y.cx == 0.5);
  CHECK(y.cy == 0.5);
  CHECK(y.w == 0.25);
  CHECK(y.h == 0.5);
  const YoloBox full = bbox_xyxy_to_yolo({0, 0, 640, 360}, d);
  CHECK(full.w == 1.0);
  CHECK(full.h == 1.0);
}

TEST_CASE("degenerate and out-of-range boxes are rejected") {
  const ImageDims d{640, 360};
  CHECK_THROWS_AS(bbox_yolo_to_xyxy({0.5, 0.5, 0.0001, 0.5}, d), ValidationError);
  CHECK_THROWS_AS(bbox_yolo_to_xyxy({0.0, 0.5, 0.2, 0.5}, d), ValidationError);
  CHECK_THROWS_AS(bbox_yolo_to_xyxy({0.5, 0.5, 1.2, 0.5}, d), ValidationError);
  CHECK_THROWS_AS(bbox_xyxy_to_yolo({0, 0, 700, 100}, d), ValidationError);
  CHECK_THROWS_AS(bbox_xyxy_to_yolo({50, 0, 40, 100}, d), ValidationError);
}

TEST_CASE("yolo round trip stays within half a pixel") {
  const ImageDims d{640, 360};
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double w = 0.02 + 0.9 * u(rng), h = 0.02 + 0.9 * u(rng);
    const double cx = w / 2 + (1 - w) * u(rng), cy = h / 2 + (1 - h) * u(rng);
    const BBox b = bbox_yolo_to_xyxy({cx, cy, w, h}, d);
    const YoloBox back = bbox_xyxy_to_yolo(b, d);
    CHECK(std::abs((back.cx - back.w / 2) * 640 - (cx - w / 2) * 640) <= 0.5 + 1e-9);
    CHECK(std::abs((back.cx + back.w / 2) * 640 - (cx + w / 2) * 640) <= 0.5 + 1e-9);
    CHECK(std::abs((back.cy - back.h / 2) * 360 - (cy - h / 2) * 360) <= 0.5 + 1e-9);
    CHECK(std::abs((back.cy + back.h / 2) * 360 - (cy + h / 2) * 360) <= 0.5 + 1e-9);
    CHECK(bbox_yolo_to_xyxy(back, d) == b);
  }
}

TEST_CASE("iou") {
  const BBox a{0, 0, 10, 10};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, {20, 20, 30, 30}) == 0.0);
  CHECK(iou(a, {10, 0, 20, 10}) == 0.0);
  CHECK(iou(a, {5, 0, 15, 10}) == doctest::Approx(50.0 / 150.0));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 100);
  for (int i = 0; i < 200; ++i) {
    BBox p{u(rng), u(rng), 0, 0}, q{u(rng), u(rng), 0, 0};
    p.x2 = p.x1 + 1 + u(rng);
    p.y2 = p.y1 + 1 + u(rng);
    q.x2 = q.x1 + 1 + u(rng);
    q.y2 = q.y1 + 1 + u(rng);
    const double v = iou(p, q);
    CHECK(v == iou(q, p));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("normalize_distribution examples") {
  const auto a = normalize_distribution(std::vector<double>{2, 2});
  CHECK(a[0] == 0.5);
  CHECK(a[1] == 0.5);
  const auto b = normalize_distribution(std::vector<double>{0, 3, 1});
  CHECK(b[0] == 0.0);
  CHECK(b[1] == 0.75);
  CHECK(b[2] == 0.25);
  CHECK_THROWS_AS(normalize_distribution(std::vector<double>{0, 0, 0}), NoEvidenceError);
  CHECK_THROWS_AS(ClassDistribution(std::vector<double>{1, -0.1}), ValidationError);
}

TEST_CASE("normalization is scale invariant and preserves argmax") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> v(6), s(6);
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = u(rng) < 0.3 ? 0.0 : u(rng);
      s[j] = 7 * v[j];
    }
    v[i % 6] += 0.01;
    s[i % 6] = 7 * v[i % 6];
    const auto n = normalize_distribution(v);
    const auto m = normalize_distribution(s);
    CHECK(n.sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(n.argmax() == ClassDistribution(v).argmax());
    for (std::size_t j = 0; j < v.size(); ++j) CHECK(n[j] == doctest::Approx(m[j]).epsilon(1e-12));
  }
}

TEST_CASE("argmax tie goes to the lowest class id") {
  CHECK(ClassDistribution(std::vector<double>{0.2, 0.4, 0.4}).argmax() == 1);
  CHECK(ClassDistribution(std::vector<double>{0.5, 0.5}).argmax() == 0);
}

TEST_CASE("model output validation") {
  ModelOutput o{{0, 0, 5, 5}, 1, 0.7, ClassDistribution(std::vector<double>{0.3, 0.7})};
  CHECK_NOTHROW(validate_model_output(o));
  o.class_id = 0;
  CHECK_THROWS_AS(validate_model_output(o), ValidationError);
  o.distribution.reset();
  o.confidence = 1.2;
  CHECK_THROWS_AS(validate_model_output(o), ValidationError);
}

TEST_CASE("class registry") {
  const ClassRegistry r({"apple", "pear"});
  CHECK(r.find("pear") == 1);
  CHECK_FALSE(r.find("kiwi").has_value());
  CHECK(r.name(0) == "apple");
  CHECK_FALSE(r.contains(2));
  CHECK_THROWS(ClassRegistry({"a", "a"}));
}

}  // TEST_SUITE
