#include "xdetect/imaging.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fmt/core.h>
#include <numbers>
#include <queue>

namespace xdetect {

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable convolution with replicated borders over an interleaved buffer.
std::vector<double> convolve_separable(std::span<const double> src, int h, int w, int c,
                                       const std::vector<double>& kernel) {
  const int r = static_cast<int>(kernel.size() / 2);
  std::vector<double> tmp(src.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) {
          const int xx = std::clamp(x + i, 0, w - 1);
          acc += kernel[i + r] * src[(static_cast<std::size_t>(y) * w + xx) * c + ch];
        }
        tmp[(static_cast<std::size_t>(y) * w + x) * c + ch] = acc;
      }
    }
  }
  std::vector<double> out(src.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) {
          const int yy = std::clamp(y + i, 0, h - 1);
          acc += kernel[i + r] * tmp[(static_cast<std::size_t>(yy) * w + x) * c + ch];
        }
        out[(static_cast<std::size_t>(y) * w + x) * c + ch] = acc;
      }
    }
  }
  return out;
}

// Transpose of convolve_separable: every output sample scatters back along
// the same clamped taps.
std::vector<double> convolve_separable_adjoint(std::span<const double> grad, int h, int w, int c,
                                               const std::vector<double>& kernel) {
  const int r = static_cast<int>(kernel.size() / 2);
  std::vector<double> tmp(grad.size(), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        const double g = grad[(static_cast<std::size_t>(y) * w + x) * c + ch];
        for (int i = -r; i <= r; ++i) {
          const int yy = std::clamp(y + i, 0, h - 1);
          tmp[(static_cast<std::size_t>(yy) * w + x) * c + ch] += kernel[i + r] * g;
        }
      }
    }
  }
  std::vector<double> out(grad.size(), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        const double g = tmp[(static_cast<std::size_t>(y) * w + x) * c + ch];
        for (int i = -r; i <= r; ++i) {
          const int xx = std::clamp(x + i, 0, w - 1);
          out[(static_cast<std::size_t>(y) * w + xx) * c + ch] += kernel[i + r] * g;
        }
      }
    }
  }
  return out;
}

std::vector<double> box_kernel(int width) {
  if (width < 1 || width % 2 == 0) throw ConfigError(fmt::format("box kernel width must be odd, got {}", width));
  return std::vector<double>(static_cast<std::size_t>(width), 1.0 / width);
}

}  // namespace

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

double mask_iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw DimensionError("mask_iou: mask dims differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    inter += (a.data[i] && b.data[i]) ? 1 : 0;
    uni += (a.data[i] || b.data[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Image box_blur(const Image& img, int kernel) {
  auto out = convolve_separable(img.data(), img.height(), img.width(), img.channels(), box_kernel(kernel));
  return Image::clipped(img.height(), img.width(), img.channels(), std::move(out));
}

Raster box_blur_adjoint(const Raster& grad, int kernel) {
  Raster out = grad;
  out.data = convolve_separable_adjoint(grad.data, grad.height, grad.width, grad.channels, box_kernel(kernel));
  return out;
}

Image gaussian_blur(const Image& img, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("gaussian sigma must be positive");
  auto out = convolve_separable(img.data(), img.height(), img.width(), img.channels(), gaussian_kernel(sigma));
  return Image::clipped(img.height(), img.width(), img.channels(), std::move(out));
}

Image unsharp_mask(const Image& img, double sigma, double amount) {
  auto blurred = convolve_separable(img.data(), img.height(), img.width(), img.channels(), gaussian_kernel(sigma));
  std::vector<double> out(img.size());
  const auto src = img.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] + amount * (src[i] - blurred[i]);
  return Image::clipped(img.height(), img.width(), img.channels(), std::move(out));
}

Raster unsharp_mask_adjoint(const Raster& grad, double sigma, double amount) {
  auto blurred_t = convolve_separable_adjoint(grad.data, grad.height, grad.width, grad.channels,
                                              gaussian_kernel(sigma));
  Raster out = grad;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = (1.0 + amount) * grad.data[i] - amount * blurred_t[i];
  }
  return out;
}

Image rotate(const Image& img, double degrees, double fill) {
  const int h = img.height(), w = img.width(), c = img.channels();
  const double theta = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cx = 0.5 * (w - 1), cy = 0.5 * (h - 1);
  std::vector<double> out(img.size(), fill);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dx = x - cx, dy = y - cy;
      // inverse of the counter-clockwise (y-down) rotation
      const double sx = cx + cs * dx - sn * dy;
      const double sy = cy + sn * dx + cs * dy;
      if (sx < 0 || sy < 0 || sx > w - 1 || sy > h - 1) continue;
      const int x0 = std::min(static_cast<int>(sx), w - 2 < 0 ? 0 : w - 2);
      const int y0 = std::min(static_cast<int>(sy), h - 2 < 0 ? 0 : h - 2);
      const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - x0, fy = sy - y0;
      for (int ch = 0; ch < c; ++ch) {
        const double v = (1 - fy) * ((1 - fx) * img.at(y0, x0, ch) + fx * img.at(y0, x1, ch)) +
                         fy * ((1 - fx) * img.at(y1, x0, ch) + fx * img.at(y1, x1, ch));
        out[(static_cast<std::size_t>(y) * w + x) * c + ch] = v;
      }
    }
  }
  return Image::clipped(h, w, c, std::move(out));
}

Image rotate90(const Image& img) {
  const int h = img.height(), w = img.width(), c = img.channels();
  std::vector<double> out(img.size());
  // output is w rows by h columns
  for (int yo = 0; yo < w; ++yo) {
    for (int xo = 0; xo < h; ++xo) {
      for (int ch = 0; ch < c; ++ch) {
        out[(static_cast<std::size_t>(yo) * h + xo) * c + ch] = img.at(xo, w - 1 - yo, ch);
      }
    }
  }
  return Image(w, h, c, std::move(out));
}

Image scale_intensity(const Image& img, double factor) {
  std::vector<double> out(img.data().begin(), img.data().end());
  for (double& v : out) v *= factor;
  return Image::clipped(img.height(), img.width(), img.channels(), std::move(out));
}

std::vector<double> border_median(const Image& img) {
  const int h = img.height(), w = img.width(), c = img.channels();
  std::vector<double> color(static_cast<std::size_t>(c));
  std::vector<double> vals;
  for (int ch = 0; ch < c; ++ch) {
    vals.clear();
    for (int x = 0; x < w; ++x) {
      vals.push_back(img.at(0, x, ch));
      if (h > 1) vals.push_back(img.at(h - 1, x, ch));
    }
    for (int y = 1; y + 1 < h; ++y) {
      vals.push_back(img.at(y, 0, ch));
      if (w > 1) vals.push_back(img.at(y, w - 1, ch));
    }
    auto mid = vals.begin() + static_cast<std::ptrdiff_t>(vals.size() / 2);
    std::nth_element(vals.begin(), mid, vals.end());
    color[ch] = *mid;
  }
  return color;
}

namespace {

Mask erode(const Mask& m) {
  Mask out(m.height, m.width);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      std::uint8_t v = 1;
      for (int dy = -1; dy <= 1 && v; ++dy) {
        for (int dx = -1; dx <= 1 && v; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= m.height || xx >= m.width) continue;
          v = m.at(yy, xx);
        }
      }
      out.at(y, x) = v;
    }
  }
  return out;
}

Mask dilate(const Mask& m) {
  Mask out(m.height, m.width);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      std::uint8_t v = 0;
      for (int dy = -1; dy <= 1 && !v; ++dy) {
        for (int dx = -1; dx <= 1 && !v; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= m.height || xx >= m.width) continue;
          v = m.at(yy, xx);
        }
      }
      out.at(y, x) = v;
    }
  }
  return out;
}

}  // namespace

Mask morph_open(const Mask& m) { return dilate(erode(m)); }
Mask morph_close(const Mask& m) { return erode(dilate(m)); }

Mask largest_component(const Mask& m) {
  std::vector<int> label(m.data.size(), 0);
  int best_label = 0;
  std::size_t best_size = 0;
  int next = 0;
  std::queue<std::pair<int, int>> q;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * m.width + x;
      if (!m.data[idx] || label[idx]) continue;
      ++next;
      std::size_t size = 0;
      label[idx] = next;
      q.emplace(y, x);
      while (!q.empty()) {
        auto [cy, cx] = q.front();
        q.pop();
        ++size;
        constexpr int dys[4] = {-1, 1, 0, 0};
        constexpr int dxs[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int ny = cy + dys[k], nx = cx + dxs[k];
          if (ny < 0 || nx < 0 || ny >= m.height || nx >= m.width) continue;
          const std::size_t n = static_cast<std::size_t>(ny) * m.width + nx;
          if (m.data[n] && !label[n]) {
            label[n] = next;
            q.emplace(ny, nx);
          }
        }
      }
      if (size > best_size) {
        best_size = size;
        best_label = next;
      }
    }
  }
  Mask out(m.height, m.width);
  if (best_label == 0) return out;
  for (std::size_t i = 0; i < label.size(); ++i) out.data[i] = label[i] == best_label ? 1 : 0;
  return out;
}

Mask segment_foreground(const Image& img, double threshold) {
  const auto bg = border_median(img);
  Mask m(img.height(), img.width());
  const int c = img.channels();
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      double d = 0.0;
      for (int ch = 0; ch < c; ++ch) d = std::max(d, std::abs(img.at(y, x, ch) - bg[ch]));
      m.at(y, x) = d > threshold ? 1 : 0;
    }
  }
  return largest_component(morph_close(morph_open(m)));
}

std::optional<BBox> mask_bbox(const Mask& m) {
  int x1 = m.width, y1 = m.height, x2 = -1, y2 = -1;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      x1 = std::min(x1, x);
      y1 = std::min(y1, y);
      x2 = std::max(x2, x);
      y2 = std::max(y2, y);
    }
  }
  if (x2 < 0) return std::nullopt;
  return BBox{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2 + 1),
              static_cast<double>(y2 + 1)};
}

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError(fmt::format("cannot read image '{}': {}", path.string(), png.message));
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError(fmt::format("cannot decode image '{}': {}", path.string(), msg));
  }
  std::vector<double> data(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) data[i] = buf[i] / 255.0;
  return Image(static_cast<int>(png.height), static_cast<int>(png.width), color ? 3 : 1, std::move(data));
}

ImageDims read_png_dims(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError(fmt::format("cannot read image '{}': {}", path.string(), png.message));
  }
  ImageDims dims{static_cast<int>(png.width), static_cast<int>(png.height)};
  png_image_free(&png);
  return dims;
}

void write_png(const Image& img, const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width());
  png.height = static_cast<png_uint_32>(img.height());
  png.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(img.size());
  const auto src = img.data();
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<png_byte>(std::lround(std::clamp(src[i], 0.0, 1.0) * 255.0));
  }
  if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError(fmt::format("cannot write image '{}': {}", path.string(), png.message));
  }
}

void draw_line(std::vector<double>& rgb, int width, int height, int x0, int y0, int x1, int y1,
               const double color[3]) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    if (x0 >= 0 && y0 >= 0 && x0 < width && y0 < height) {
      for (int ch = 0; ch < 3; ++ch) rgb[(static_cast<std::size_t>(y0) * width + x0) * 3 + ch] = color[ch];
    }
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace xdetect
