#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xdetect {

// Error hierarchy. Every failure the library reports derives from Error so
// callers (the CLI in particular) can map them to exit codes in one place.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class ValidationError : public Error {
 public:
  using Error::Error;
};
class DimensionError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};
class NoEvidenceError : public Error {
 public:
  using Error::Error;
};

using ClassId = int;

/// Raster with intensities in [0,1], row-major, interleaved channels.
class Image {
 public:
  Image() = default;
  /// Filled image. Throws ValidationError on bad dims or out-of-range fill.
  Image(int height, int width, int channels, double fill = 0.0);
  /// Takes ownership of `data`; throws ValidationError if any value is
  /// outside [0,1] or the size does not match.
  Image(int height, int width, int channels, std::vector<double> data);

  /// Same as the data constructor but clamps into [0,1] first (NaN -> 0).
  static Image clipped(int height, int width, int channels, std::vector<double> data);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double at(int y, int x, int c = 0) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  std::span<const double> data() const { return data_; }

  /// Luminance (0.299R + 0.587G + 0.114B); identity on 1-channel images.
  Image to_gray() const;
  /// Replicates a gray image into 3 channels; identity on 3-channel images.
  Image to_rgb() const;
  Image crop(int x1, int y1, int x2, int y2) const;

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

/// Unconstrained image-shaped buffer (gradients, masks of weights).
struct Raster {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Raster() = default;
  Raster(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  double& at(int y, int x, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

struct ImageDims {
  int width = 0;
  int height = 0;
};

/// Axis-aligned box in pixel coordinates, half-open: [x1,x2) x [y1,y2).
struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Throws ValidationError unless x1<x2, y1<y2 and the box lies in the image.
void validate_bbox(const BBox& box, ImageDims dims);
BBox clamp_bbox(const BBox& box, ImageDims dims);

struct YoloBox {
  double cx = 0, cy = 0, w = 0, h = 0;
};

BBox bbox_yolo_to_xyxy(const YoloBox& yolo, ImageDims dims);
YoloBox bbox_xyxy_to_yolo(const BBox& box, ImageDims dims);

double iou(const BBox& a, const BBox& b);

/// Non-negative per-class mass over a fixed class set.
class ClassDistribution {
 public:
  ClassDistribution() = default;
  explicit ClassDistribution(std::size_t n_classes) : mass_(n_classes, 0.0) {}
  /// Throws ValidationError on negative or non-finite entries.
  explicit ClassDistribution(std::vector<double> mass);

  std::size_t size() const { return mass_.size(); }
  double operator[](std::size_t i) const { return mass_[i]; }
  std::span<const double> mass() const { return mass_; }
  double sum() const;

  /// Lowest class id wins ties. Throws NoEvidenceError when empty.
  ClassId argmax() const;
  /// Sum equals 1; throws NoEvidenceError when every entry is zero.
  ClassDistribution normalized() const;

  ClassDistribution& operator+=(const ClassDistribution& other);
  friend ClassDistribution operator+(ClassDistribution a, const ClassDistribution& b) {
    a += b;
    return a;
  }
  friend bool operator==(const ClassDistribution&, const ClassDistribution&) = default;

 private:
  std::vector<double> mass_;
};

ClassDistribution normalize_distribution(std::span<const double> raw);

struct ModelOutput {
  BBox bbox;
  ClassId class_id = 0;
  double confidence = 0.0;
  std::optional<ClassDistribution> distribution;
};

/// Throws ValidationError when confidence is outside [0,1] or the distribution
/// argmax disagrees with class_id.
void validate_model_output(const ModelOutput& out);

/// Ordered class names; ids are positions.
class ClassRegistry {
 public:
  ClassRegistry() = default;
  explicit ClassRegistry(std::vector<std::string> names);

  std::size_t size() const { return names_.size(); }
  const std::string& name(ClassId id) const;
  std::optional<ClassId> find(const std::string& name) const;
  bool contains(ClassId id) const { return id >= 0 && static_cast<std::size_t>(id) < names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
};

struct Annotation {
  ClassId label_id = 0;
  std::string label_name;
  BBox bbox;
  std::map<std::string, std::string> attributes;
};

}  // namespace xdetect
