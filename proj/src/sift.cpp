#include "xdetect/sift.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/core.h>
#include <limits>
#include <numbers>

namespace xdetect::sift {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr int kBorder = 5;             // detection margin, octave pixels
constexpr int kMaxRefineSteps = 5;
constexpr int kOriBins = 36;
constexpr double kOriPeakRatio = 0.8;
constexpr double kOriSigmaFactor = 1.5;
constexpr int kDescWidth = 4;
constexpr int kDescBins = 8;
constexpr double kDescMagnitude = 3.0;  // spatial bin width in units of sigma
constexpr float kDescClamp = 0.2f;
constexpr double kAssumedInputBlur = 0.5;

Plane to_plane(const Image& image) {
  const Image gray = image.to_gray();
  Plane p{gray.width(), gray.height(), std::vector<float>(gray.size())};
  const auto src = gray.data();
  for (std::size_t i = 0; i < src.size(); ++i) p.v[i] = static_cast<float>(src[i]);
  return p;
}

Plane blur(const Plane& src, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += std::exp(-0.5 * i * i / (sigma * sigma));
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma)) / sum;
  }
  const int w = src.width, h = src.height;
  std::vector<float> tmp(src.v.size());
  for (int y = 0; y < h; ++y) {
    const float* row = &src.v[static_cast<std::size_t>(y) * w];
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * row[std::clamp(x + i, 0, w - 1)];
      tmp[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
    }
  }
  Plane out{w, h, std::vector<float>(src.v.size())};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        acc += k[i + radius] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, h - 1)) * w + x];
      }
      out.v[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
    }
  }
  return out;
}

Plane downsample(const Plane& src) {
  Plane out{src.width / 2, src.height / 2, {}};
  out.v.resize(static_cast<std::size_t>(out.width) * out.height);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) out.v[static_cast<std::size_t>(y) * out.width + x] = src.at(2 * y, 2 * x);
  }
  return out;
}

Plane subtract(const Plane& a, const Plane& b) {
  Plane out{a.width, a.height, std::vector<float>(a.v.size())};
  for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] - b.v[i];
  return out;
}

bool is_extremum(const std::vector<Plane>& dog, int s, int y, int x) {
  const float v = dog[s].at(y, x);
  if (v > 0) {
    for (int ds = -1; ds <= 1; ++ds) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (ds == 0 && dy == 0 && dx == 0) continue;
          if (dog[s + ds].at(y + dy, x + dx) >= v) return false;
        }
      }
    }
    return true;
  }
  if (v < 0) {
    for (int ds = -1; ds <= 1; ++ds) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (ds == 0 && dy == 0 && dx == 0) continue;
          if (dog[s + ds].at(y + dy, x + dx) <= v) return false;
        }
      }
    }
    return true;
  }
  return false;
}

// Solves the 3x3 system H * x = -g by Cramer's rule; false when singular.
bool solve3(const double H[3][3], const double g[3], double x[3]) {
  const double det = H[0][0] * (H[1][1] * H[2][2] - H[1][2] * H[2][1]) -
                     H[0][1] * (H[1][0] * H[2][2] - H[1][2] * H[2][0]) +
                     H[0][2] * (H[1][0] * H[2][1] - H[1][1] * H[2][0]);
  if (std::abs(det) < 1e-12) return false;
  for (int c = 0; c < 3; ++c) {
    double M[3][3];
    for (int r = 0; r < 3; ++r) {
      for (int k = 0; k < 3; ++k) M[r][k] = (k == c) ? -g[r] : H[r][k];
    }
    x[c] = (M[0][0] * (M[1][1] * M[2][2] - M[1][2] * M[2][1]) - M[0][1] * (M[1][0] * M[2][2] - M[1][2] * M[2][0]) +
            M[0][2] * (M[1][0] * M[2][1] - M[1][1] * M[2][0])) /
           det;
  }
  return true;
}

struct Refined {
  int s, y, x;
  double ds, dy, dx;
  double value;
};

// Quadratic fit around (s,y,x); follows the offset to neighbouring samples
// until it settles inside the half-pixel cell.
std::optional<Refined> refine(const std::vector<Plane>& dog, int intervals, int s, int y, int x,
                              double contrast_threshold, double edge_ratio) {
  const int w = dog[0].width, h = dog[0].height;
  double off[3] = {0, 0, 0};
  double grad[3] = {0, 0, 0};
  for (int step = 0;; ++step) {
    if (step >= kMaxRefineSteps) return std::nullopt;
    const Plane& prev = dog[s - 1];
    const Plane& cur = dog[s];
    const Plane& next = dog[s + 1];
    const double v = cur.at(y, x);
    grad[0] = 0.5 * (next.at(y, x) - prev.at(y, x));
    grad[1] = 0.5 * (cur.at(y + 1, x) - cur.at(y - 1, x));
    grad[2] = 0.5 * (cur.at(y, x + 1) - cur.at(y, x - 1));
    double H[3][3];
    H[0][0] = next.at(y, x) + prev.at(y, x) - 2 * v;
    H[1][1] = cur.at(y + 1, x) + cur.at(y - 1, x) - 2 * v;
    H[2][2] = cur.at(y, x + 1) + cur.at(y, x - 1) - 2 * v;
    H[0][1] = H[1][0] = 0.25 * (next.at(y + 1, x) - next.at(y - 1, x) - prev.at(y + 1, x) + prev.at(y - 1, x));
    H[0][2] = H[2][0] = 0.25 * (next.at(y, x + 1) - next.at(y, x - 1) - prev.at(y, x + 1) + prev.at(y, x - 1));
    H[1][2] = H[2][1] =
        0.25 * (cur.at(y + 1, x + 1) - cur.at(y + 1, x - 1) - cur.at(y - 1, x + 1) + cur.at(y - 1, x - 1));
    if (!solve3(H, grad, off)) return std::nullopt;
    if (std::abs(off[0]) < 0.5 && std::abs(off[1]) < 0.5 && std::abs(off[2]) < 0.5) break;
    if (std::abs(off[0]) > 1e3 || std::abs(off[1]) > 1e3 || std::abs(off[2]) > 1e3) return std::nullopt;
    s += static_cast<int>(std::lround(off[0]));
    y += static_cast<int>(std::lround(off[1]));
    x += static_cast<int>(std::lround(off[2]));
    if (s < 1 || s > intervals || y < kBorder || y >= h - kBorder || x < kBorder || x >= w - kBorder) {
      return std::nullopt;
    }
  }
  const double value = dog[s].at(y, x) + 0.5 * (grad[0] * off[0] + grad[1] * off[1] + grad[2] * off[2]);
  if (std::abs(value) < contrast_threshold) return std::nullopt;

  const Plane& cur = dog[s];
  const double v = cur.at(y, x);
  const double dxx = cur.at(y, x + 1) + cur.at(y, x - 1) - 2 * v;
  const double dyy = cur.at(y + 1, x) + cur.at(y - 1, x) - 2 * v;
  const double dxy =
      0.25 * (cur.at(y + 1, x + 1) - cur.at(y + 1, x - 1) - cur.at(y - 1, x + 1) + cur.at(y - 1, x - 1));
  const double tr = dxx + dyy;
  const double det = dxx * dyy - dxy * dxy;
  if (det <= 0 || tr * tr * edge_ratio >= (edge_ratio + 1) * (edge_ratio + 1) * det) return std::nullopt;
  return Refined{s, y, x, off[0], off[1], off[2], value};
}

// Gaussian-weighted 36-bin gradient orientation histogram; returns every
// smoothed peak within 80% of the maximum, parabolically interpolated.
std::vector<double> dominant_orientations(const Plane& img, int y, int x, double sigma) {
  const int radius = static_cast<int>(std::lround(3.0 * kOriSigmaFactor * sigma));
  const double weight_scale = -0.5 / ((kOriSigmaFactor * sigma) * (kOriSigmaFactor * sigma));
  std::array<double, kOriBins> hist{};
  for (int i = -radius; i <= radius; ++i) {
    const int yy = y + i;
    if (yy <= 0 || yy >= img.height - 1) continue;
    for (int j = -radius; j <= radius; ++j) {
      const int xx = x + j;
      if (xx <= 0 || xx >= img.width - 1) continue;
      const double gx = img.at(yy, xx + 1) - img.at(yy, xx - 1);
      const double gy = img.at(yy + 1, xx) - img.at(yy - 1, xx);
      const double mag = std::sqrt(gx * gx + gy * gy);
      double ang = std::atan2(gy, gx);
      if (ang < 0) ang += kTwoPi;
      int bin = static_cast<int>(std::lround(ang * kOriBins / kTwoPi));
      if (bin >= kOriBins) bin -= kOriBins;
      hist[bin] += std::exp((i * i + j * j) * weight_scale) * mag;
    }
  }
  std::array<double, kOriBins> smooth{};
  for (int b = 0; b < kOriBins; ++b) {
    auto at = [&](int k) { return hist[(k + kOriBins) % kOriBins]; };
    smooth[b] = (at(b - 2) + at(b + 2)) * (1.0 / 16) + (at(b - 1) + at(b + 1)) * (4.0 / 16) + at(b) * (6.0 / 16);
  }
  const double max_val = *std::max_element(smooth.begin(), smooth.end());
  std::vector<double> out;
  if (max_val <= 0) return out;
  for (int b = 0; b < kOriBins; ++b) {
    const double l = smooth[(b - 1 + kOriBins) % kOriBins];
    const double r = smooth[(b + 1) % kOriBins];
    const double c = smooth[b];
    if (c > l && c > r && c >= kOriPeakRatio * max_val) {
      double fb = b + 0.5 * (l - r) / (l - 2 * c + r);
      if (fb < 0) fb += kOriBins;
      if (fb >= kOriBins) fb -= kOriBins;
      double ang = fb * kTwoPi / kOriBins;
      if (ang >= kTwoPi) ang -= kTwoPi;
      out.push_back(ang);
    }
  }
  return out;
}

// Half-extent of the descriptor's 4x4 bin grid, octave pixels.
double descriptor_radius(double sigma_oct) { return kDescMagnitude * sigma_oct * kDescWidth * 0.5; }

}  // namespace

void to_json(nlohmann::json& j, const SiftParams& p) {
  j = nlohmann::json{{"intervals", p.intervals},
                     {"base_sigma", p.base_sigma},
                     {"n_octaves", p.n_octaves},
                     {"contrast_threshold", p.contrast_threshold},
                     {"edge_ratio", p.edge_ratio},
                     {"match_ratio", p.match_ratio}};
}

void from_json(const nlohmann::json& j, SiftParams& p) {
  p.intervals = j.value("intervals", p.intervals);
  p.base_sigma = j.value("base_sigma", p.base_sigma);
  p.n_octaves = j.value("n_octaves", p.n_octaves);
  p.contrast_threshold = j.value("contrast_threshold", p.contrast_threshold);
  p.edge_ratio = j.value("edge_ratio", p.edge_ratio);
  p.match_ratio = j.value("match_ratio", p.match_ratio);
}

double ScaleSpace::level_sigma(double level) const {
  return base_sigma * std::pow(2.0, level / intervals);
}

int default_octaves(int width, int height) {
  const int min_dim = std::min(width, height);
  return std::max(1, static_cast<int>(std::floor(std::log2(static_cast<double>(min_dim)))) - 2);
}

ScaleSpace build_scale_space(const Image& image, int intervals, double base_sigma, int n_octaves) {
  if (std::min(image.width(), image.height()) < 16) {
    throw ValidationError(
        fmt::format("image {}x{} too small for SIFT (min side 16)", image.width(), image.height()));
  }
  if (intervals < 1) throw ConfigError("SIFT intervals must be >= 1");
  if (!(base_sigma > kAssumedInputBlur)) throw ConfigError("SIFT base sigma must exceed 0.5");
  if (n_octaves <= 0) n_octaves = default_octaves(image.width(), image.height());
  {
    const int min_dim = std::min(image.width(), image.height());
    if ((min_dim >> (n_octaves - 1)) < 4) {
      throw ConfigError(fmt::format("{} octaves do not fit a {}x{} image", n_octaves, image.width(), image.height()));
    }
  }

  ScaleSpace ss;
  ss.base_sigma = base_sigma;
  ss.intervals = intervals;
  ss.source_width = image.width();
  ss.source_height = image.height();

  const int levels = intervals + 3;
  const double k = std::pow(2.0, 1.0 / intervals);
  std::vector<double> increments(levels, 0.0);
  for (int i = 1; i < levels; ++i) {
    const double prev = base_sigma * std::pow(k, i - 1);
    const double total = prev * k;
    increments[i] = std::sqrt(total * total - prev * prev);
  }

  Plane base = blur(to_plane(image), std::sqrt(base_sigma * base_sigma - kAssumedInputBlur * kAssumedInputBlur));
  for (int o = 0; o < n_octaves; ++o) {
    std::vector<Plane> stack;
    stack.reserve(levels);
    stack.push_back(o == 0 ? std::move(base) : downsample(ss.gaussians[o - 1][intervals]));
    for (int i = 1; i < levels; ++i) stack.push_back(blur(stack.back(), increments[i]));
    std::vector<Plane> dog;
    dog.reserve(levels - 1);
    for (int i = 0; i + 1 < levels; ++i) dog.push_back(subtract(stack[i + 1], stack[i]));
    ss.gaussians.push_back(std::move(stack));
    ss.dog.push_back(std::move(dog));
  }
  return ss;
}

std::vector<Keypoint> detect_keypoints(const ScaleSpace& ss, double contrast_threshold, double edge_ratio) {
  std::vector<Keypoint> out;
  const float prefilter = static_cast<float>(0.5 * contrast_threshold);
  for (int o = 0; o < ss.octaves(); ++o) {
    const auto& dog = ss.dog[o];
    const int w = dog[0].width, h = dog[0].height;
    const double octave_scale = std::ldexp(1.0, o);
    for (int s = 1; s <= ss.intervals; ++s) {
      for (int y = kBorder; y < h - kBorder; ++y) {
        for (int x = kBorder; x < w - kBorder; ++x) {
          if (std::abs(dog[s].at(y, x)) <= prefilter) continue;
          if (!is_extremum(dog, s, y, x)) continue;
          const auto r = refine(dog, ss.intervals, s, y, x, contrast_threshold, edge_ratio);
          if (!r) continue;
          const double level = r->s + r->ds;
          const double sigma_oct = ss.level_sigma(level);
          const auto& gauss = ss.gaussians[o][r->s];
          for (double ori : dominant_orientations(gauss, r->y, r->x, sigma_oct)) {
            Keypoint kp;
            kp.x = (r->x + r->dx) * octave_scale;
            kp.y = (r->y + r->dy) * octave_scale;
            kp.sigma = sigma_oct * octave_scale;
            kp.orientation = ori;
            kp.response = std::abs(r->value);
            kp.octave = o;
            kp.level = r->s;
            kp.level_offset = r->ds;
            out.push_back(kp);
          }
        }
      }
    }
  }
  return out;
}

DescriptorSet compute_descriptors(const ScaleSpace& ss, std::span<const Keypoint> keypoints) {
  DescriptorSet out;
  constexpr int d = kDescWidth;
  constexpr int n = kDescBins;
  for (std::size_t ki = 0; ki < keypoints.size(); ++ki) {
    const Keypoint& kp = keypoints[ki];
    if (kp.octave < 0 || kp.octave >= ss.octaves() || kp.level < 0 || kp.level >= ss.intervals + 3) continue;
    const Plane& img = ss.gaussians[kp.octave][kp.level];
    const double scale = std::ldexp(1.0, -kp.octave);
    const double cx = kp.x * scale, cy = kp.y * scale;
    const double sigma_oct = kp.sigma * scale;
    const double hist_width = kDescMagnitude * sigma_oct;
    const double extent = descriptor_radius(sigma_oct);
    // the gradient stencil needs one extra pixel on each side
    if (cx - extent < 1 || cy - extent < 1 || cx + extent > img.width - 2 || cy + extent > img.height - 2) continue;

    const int radius = static_cast<int>(std::ceil(hist_width * std::numbers::sqrt2 * (d + 1) * 0.5));
    const double cos_t = std::cos(kp.orientation), sin_t = std::sin(kp.orientation);
    const double weight_scale = -1.0 / (0.5 * d * d);
    std::array<double, (d + 2) * (d + 2) * (n + 2)> hist{};
    auto idx = [&](int r, int c, int o) { return (static_cast<std::size_t>(r) * (d + 2) + c) * (n + 2) + o; };

    const int ix = static_cast<int>(std::lround(cx)), iy = static_cast<int>(std::lround(cy));
    for (int i = -radius; i <= radius; ++i) {
      for (int j = -radius; j <= radius; ++j) {
        const int yy = iy + i, xx = ix + j;
        if (yy <= 0 || yy >= img.height - 1 || xx <= 0 || xx >= img.width - 1) continue;
        const double ox = xx - cx, oy = yy - cy;
        // offset expressed in the keypoint's rotated frame, in bin units
        const double u = (cos_t * ox + sin_t * oy) / hist_width;
        const double v = (-sin_t * ox + cos_t * oy) / hist_width;
        const double rbin = v + d / 2.0 - 0.5;
        const double cbin = u + d / 2.0 - 0.5;
        if (rbin <= -1 || rbin >= d || cbin <= -1 || cbin >= d) continue;
        const double gx = img.at(yy, xx + 1) - img.at(yy, xx - 1);
        const double gy = img.at(yy + 1, xx) - img.at(yy - 1, xx);
        double ang = std::atan2(gy, gx) - kp.orientation;
        while (ang < 0) ang += kTwoPi;
        while (ang >= kTwoPi) ang -= kTwoPi;
        const double obin = ang * n / kTwoPi;
        const double mag = std::sqrt(gx * gx + gy * gy) * std::exp((u * u + v * v) * weight_scale);

        const int r0 = static_cast<int>(std::floor(rbin));
        const int c0 = static_cast<int>(std::floor(cbin));
        int o0 = static_cast<int>(std::floor(obin));
        const double fr = rbin - r0, fc = cbin - c0, fo = obin - o0;
        if (o0 >= n) o0 -= n;
        for (int a = 0; a <= 1; ++a) {
          const double wr = a ? fr : 1 - fr;
          for (int b = 0; b <= 1; ++b) {
            const double wc = b ? fc : 1 - fc;
            for (int c = 0; c <= 1; ++c) {
              const double wo = c ? fo : 1 - fo;
              hist[idx(r0 + 1 + a, c0 + 1 + b, (o0 + c) % n)] += mag * wr * wc * wo;
            }
          }
        }
      }
    }

    Descriptor desc{};
    double norm = 0.0;
    for (int r = 0; r < d; ++r) {
      for (int c = 0; c < d; ++c) {
        for (int o = 0; o < n; ++o) {
          const double val = hist[idx(r + 1, c + 1, o)];
          desc[(r * d + c) * n + o] = static_cast<float>(val);
          norm += val * val;
        }
      }
    }
    if (!(norm > 0)) continue;
    norm = std::sqrt(norm);
    double norm2 = 0.0;
    for (float& e : desc) {
      e = std::min(static_cast<float>(e / norm), kDescClamp);
      norm2 += static_cast<double>(e) * e;
    }
    norm2 = std::sqrt(norm2);
    for (float& e : desc) e = static_cast<float>(e / norm2);
    out.descriptors.push_back(desc);
    out.keypoint_index.push_back(ki);
  }
  return out;
}

double descriptor_distance(const Descriptor& a, const Descriptor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

MatchSet match_descriptors(std::span<const Descriptor> a, std::span<const Descriptor> b, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError(fmt::format("match ratio {} outside (0,1)", ratio));
  MatchSet out;
  if (a.empty() || b.empty()) return out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    double second = std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double dist = descriptor_distance(a[i], b[j]);
      if (dist < best) {
        second = best;
        best = dist;
        best_j = j;
      } else if (dist < second) {
        second = dist;
      }
    }
    const bool accepted = b.size() < 2 ? true : best < ratio * second;
    if (accepted) out.pairs.push_back(Match{i, best_j, best});
  }
  return out;
}

Features extract_features(const Image& image, const SiftParams& params) {
  const ScaleSpace ss = build_scale_space(image, params.intervals, params.base_sigma, params.n_octaves);
  const auto kps = detect_keypoints(ss, params.contrast_threshold, params.edge_ratio);
  const auto set = compute_descriptors(ss, kps);
  Features f;
  f.descriptors = set.descriptors;
  f.keypoints.reserve(set.keypoint_index.size());
  for (std::size_t idx : set.keypoint_index) f.keypoints.push_back(kps[idx]);
  return f;
}

std::size_t match_count(const Image& a, const Image& b, const SiftParams& params) {
  const Features fa = extract_features(a, params);
  const Features fb = extract_features(b, params);
  return match_descriptors(fa.descriptors, fb.descriptors, params.match_ratio).count();
}

nlohmann::json keypoints_to_json(std::span<const Keypoint> keypoints) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& kp : keypoints) {
    arr.push_back({{"x", kp.x}, {"y", kp.y}, {"sigma", kp.sigma}, {"orientation", kp.orientation}});
  }
  return arr;
}

}  // namespace xdetect::sift
