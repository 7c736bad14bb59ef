#include "xdetect/core.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/core.h>

namespace xdetect {

namespace {

void check_dims(int height, int width, int channels) {
  if (height < 1 || width < 1) {
    throw ValidationError(fmt::format("image dims must be positive, got {}x{}", width, height));
  }
  if (channels != 1 && channels != 3) {
    throw ValidationError(fmt::format("image must have 1 or 3 channels, got {}", channels));
  }
}

}  // namespace

Image::Image(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
  check_dims(height, width, channels);
  if (!(fill >= 0.0 && fill <= 1.0)) throw ValidationError("image fill outside [0,1]");
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

Image::Image(int height, int width, int channels, std::vector<double> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
  check_dims(height, width, channels);
  if (data_.size() != static_cast<std::size_t>(height) * width * channels) {
    throw ValidationError(fmt::format("image data has {} values, expected {}", data_.size(),
                                      static_cast<std::size_t>(height) * width * channels));
  }
  for (double v : data_) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("image intensity outside [0,1]");
  }
}

Image Image::clipped(int height, int width, int channels, std::vector<double> data) {
  for (double& v : data) v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
  return Image(height, width, channels, std::move(data));
}

Image Image::to_gray() const {
  if (channels_ == 1) return *this;
  std::vector<double> out(static_cast<std::size_t>(height_) * width_);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double* p = &data_[i * 3];
    out[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  }
  return Image::clipped(height_, width_, 1, std::move(out));
}

Image Image::to_rgb() const {
  if (channels_ == 3) return *this;
  std::vector<double> out(data_.size() * 3);
  for (std::size_t i = 0; i < data_.size(); ++i) out[3 * i] = out[3 * i + 1] = out[3 * i + 2] = data_[i];
  return Image(height_, width_, 3, std::move(out));
}

Image Image::crop(int x1, int y1, int x2, int y2) const {
  if (x1 < 0 || y1 < 0 || x2 > width_ || y2 > height_ || x1 >= x2 || y1 >= y2) {
    throw ValidationError(fmt::format("crop ({},{},{},{}) outside {}x{} image", x1, y1, x2, y2, width_, height_));
  }
  const int w = x2 - x1;
  const int h = y2 - y1;
  std::vector<double> out(static_cast<std::size_t>(w) * h * channels_);
  for (int y = 0; y < h; ++y) {
    const auto src = data_.begin() + (static_cast<std::size_t>(y + y1) * width_ + x1) * channels_;
    std::copy(src, src + static_cast<std::ptrdiff_t>(w) * channels_,
              out.begin() + static_cast<std::ptrdiff_t>(y) * w * channels_);
  }
  return Image(h, w, channels_, std::move(out));
}

void validate_bbox(const BBox& box, ImageDims dims) {
  if (!box.valid()) {
    throw ValidationError(fmt::format("degenerate bbox ({},{},{},{})", box.x1, box.y1, box.x2, box.y2));
  }
  if (box.x1 < 0 || box.y1 < 0 || box.x2 > dims.width || box.y2 > dims.height) {
    throw ValidationError(fmt::format("bbox ({},{},{},{}) outside {}x{} image", box.x1, box.y1, box.x2, box.y2,
                                      dims.width, dims.height));
  }
}

BBox clamp_bbox(const BBox& box, ImageDims dims) {
  return BBox{std::clamp(box.x1, 0.0, static_cast<double>(dims.width)),
              std::clamp(box.y1, 0.0, static_cast<double>(dims.height)),
              std::clamp(box.x2, 0.0, static_cast<double>(dims.width)),
              std::clamp(box.y2, 0.0, static_cast<double>(dims.height))};
}

BBox bbox_yolo_to_xyxy(const YoloBox& yolo, ImageDims dims) {
  for (double f : {yolo.cx, yolo.cy, yolo.w, yolo.h}) {
    if (!(f > 0.0 && f <= 1.0)) {
      throw ValidationError(fmt::format("YOLO fraction {} outside (0,1]", f));
    }
  }
  const double W = dims.width;
  const double H = dims.height;
  BBox box{std::round((yolo.cx - yolo.w / 2) * W), std::round((yolo.cy - yolo.h / 2) * H),
           std::round((yolo.cx + yolo.w / 2) * W), std::round((yolo.cy + yolo.h / 2) * H)};
  box = clamp_bbox(box, dims);
  if (!box.valid()) {
    throw ValidationError(fmt::format("YOLO box ({},{},{},{}) has zero area on {}x{} image", yolo.cx, yolo.cy,
                                      yolo.w, yolo.h, dims.width, dims.height));
  }
  return box;
}

YoloBox bbox_xyxy_to_yolo(const BBox& box, ImageDims dims) {
  validate_bbox(box, dims);
  const double W = dims.width;
  const double H = dims.height;
  return YoloBox{box.center_x() / W, box.center_y() / H, box.width() / W, box.height() / H};
}

double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return inter / uni;
}

ClassDistribution::ClassDistribution(std::vector<double> mass) : mass_(std::move(mass)) {
  for (double m : mass_) {
    if (!(m >= 0.0) || !std::isfinite(m)) throw ValidationError("class mass must be finite and non-negative");
  }
}

double ClassDistribution::sum() const {
  double s = 0.0;
  for (double m : mass_) s += m;
  return s;
}

ClassId ClassDistribution::argmax() const {
  if (mass_.empty()) throw NoEvidenceError("argmax of an empty distribution");
  std::size_t best = 0;
  for (std::size_t i = 1; i < mass_.size(); ++i) {
    if (mass_[i] > mass_[best]) best = i;
  }
  return static_cast<ClassId>(best);
}

ClassDistribution ClassDistribution::normalized() const { return normalize_distribution(mass_); }

ClassDistribution& ClassDistribution::operator+=(const ClassDistribution& other) {
  if (mass_.empty()) mass_.assign(other.size(), 0.0);
  if (other.size() != mass_.size()) {
    throw DimensionError(fmt::format("adding distributions over {} and {} classes", mass_.size(), other.size()));
  }
  for (std::size_t i = 0; i < mass_.size(); ++i) mass_[i] += other.mass_[i];
  return *this;
}

ClassDistribution normalize_distribution(std::span<const double> raw) {
  double total = 0.0;
  for (double v : raw) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("class mass must be finite and non-negative");
    total += v;
  }
  if (!(total > 0.0)) throw NoEvidenceError("no evidence: every class mass is zero");
  std::vector<double> out(raw.begin(), raw.end());
  for (double& v : out) v /= total;
  return ClassDistribution(std::move(out));
}

void validate_model_output(const ModelOutput& out) {
  if (!(out.confidence >= 0.0 && out.confidence <= 1.0)) {
    throw ValidationError(fmt::format("confidence {} outside [0,1]", out.confidence));
  }
  if (out.distribution && out.distribution->argmax() != out.class_id) {
    throw ValidationError(fmt::format("distribution argmax {} disagrees with class {}", out.distribution->argmax(),
                                      out.class_id));
  }
}

ClassRegistry::ClassRegistry(std::vector<std::string> names) : names_(std::move(names)) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].empty()) throw ValidationError(fmt::format("class {} has an empty name", i));
    for (std::size_t j = 0; j < i; ++j) {
      if (names_[i] == names_[j]) throw ValidationError(fmt::format("duplicate class name '{}'", names_[i]));
    }
  }
}

const std::string& ClassRegistry::name(ClassId id) const {
  if (!contains(id)) throw ValidationError(fmt::format("unknown class id {}", id));
  return names_[static_cast<std::size_t>(id)];
}

std::optional<ClassId> ClassRegistry::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return static_cast<ClassId>(i);
  }
  return std::nullopt;
}

}  // namespace xdetect
