#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "xdetect/core.hpp"

namespace xdetect {

/// Binary mask, row-major, 1 = foreground.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
};

double mask_iou(const Mask& a, const Mask& b);

// Linear filters. Borders replicate the edge pixel.

/// Mean filter of odd width `kernel`, separable.
Image box_blur(const Image& img, int kernel);
/// Exact adjoint of box_blur's linear map (before any clipping).
Raster box_blur_adjoint(const Raster& grad, int kernel);
Image gaussian_blur(const Image& img, double sigma);
/// in + amount * (in - gaussian(in)), clipped.
Image unsharp_mask(const Image& img, double sigma, double amount);
/// Adjoint of the unclipped unsharp map.
Raster unsharp_mask_adjoint(const Raster& grad, double sigma, double amount);

/// Rotates about the image center by `degrees` (counter-clockwise in display
/// coordinates), bilinear, pixels mapping outside the source take `fill`.
Image rotate(const Image& img, double degrees, double fill = 0.0);
/// Exact 90 degree counter-clockwise rotation; output is width x height.
Image rotate90(const Image& img);
Image scale_intensity(const Image& img, double factor);

/// Median color along the outer one-pixel border.
std::vector<double> border_median(const Image& img);

/// Pixels whose max per-channel distance to the median border color exceeds
/// `threshold`, followed by a 3x3 open then close and reduction to the
/// largest 4-connected component. May return an empty mask.
Mask segment_foreground(const Image& img, double threshold);

Mask morph_open(const Mask& m);
Mask morph_close(const Mask& m);
Mask largest_component(const Mask& m);
/// Tight bounding box of the mask's foreground; nullopt when empty.
std::optional<BBox> mask_bbox(const Mask& m);

// Raster file I/O (8-bit PNG, gray or RGB). Values are divided by 255 on read
// and rounded after multiplying by 255 on write.
Image read_png(const std::filesystem::path& path);
void write_png(const Image& img, const std::filesystem::path& path);
ImageDims read_png_dims(const std::filesystem::path& path);

/// Draws a straight line into a 3-channel raster (values clamped later by the caller).
void draw_line(std::vector<double>& rgb, int width, int height, int x0, int y0, int x1, int y1,
               const double color[3]);

}  // namespace xdetect
