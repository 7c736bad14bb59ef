#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "json.hpp"

#include "xdetect/core.hpp"

namespace xdetect::sift {

struct SiftParams {
  int intervals = 3;
  double base_sigma = 1.6;
  /// 0 selects floor(log2(min dimension)) - 2.
  int n_octaves = 0;
  double contrast_threshold = 0.03;
  double edge_ratio = 10.0;
  double match_ratio = 0.8;

  friend bool operator==(const SiftParams&, const SiftParams&) = default;
};

void to_json(nlohmann::json& j, const SiftParams& p);
void from_json(const nlohmann::json& j, SiftParams& p);

/// Single-channel float plane used inside the scale space.
struct Plane {
  int width = 0;
  int height = 0;
  std::vector<float> v;

  float at(int y, int x) const { return v[static_cast<std::size_t>(y) * width + x]; }
};

struct ScaleSpace {
  /// gaussians[o] holds intervals + 3 levels; dog[o] holds intervals + 2.
  std::vector<std::vector<Plane>> gaussians;
  std::vector<std::vector<Plane>> dog;
  double base_sigma = 1.6;
  int intervals = 3;
  int source_width = 0;
  int source_height = 0;

  int octaves() const { return static_cast<int>(gaussians.size()); }
  /// Blur of level `level` relative to its own octave's sampling grid.
  double level_sigma(double level) const;
};

struct Keypoint {
  double x = 0, y = 0;          // source image coordinates
  double sigma = 0;             // scale in source pixels
  double orientation = 0;       // radians in [0, 2pi)
  double response = 0;          // |DoG| at the refined extremum
  int octave = 0;
  int level = 0;                // DoG level index the extremum was found on
  double level_offset = 0;      // subpixel refinement along scale
};

using Descriptor = std::array<float, 128>;

struct DescriptorSet {
  std::vector<Descriptor> descriptors;
  /// keypoint_index[i] is the input keypoint that produced descriptors[i].
  std::vector<std::size_t> keypoint_index;
};

struct Match {
  std::size_t index_a = 0;
  std::size_t index_b = 0;
  double distance = 0;
};

struct MatchSet {
  std::vector<Match> pairs;
  std::size_t count() const { return pairs.size(); }
};

/// Keypoints paired one-to-one with their descriptors.
struct Features {
  std::vector<Keypoint> keypoints;
  std::vector<Descriptor> descriptors;
};

int default_octaves(int width, int height);

/// Throws ValidationError when the smaller image side is below 16 pixels.
ScaleSpace build_scale_space(const Image& image, int intervals, double base_sigma, int n_octaves);
std::vector<Keypoint> detect_keypoints(const ScaleSpace& ss, double contrast_threshold, double edge_ratio);
DescriptorSet compute_descriptors(const ScaleSpace& ss, std::span<const Keypoint> keypoints);
MatchSet match_descriptors(std::span<const Descriptor> a, std::span<const Descriptor> b, double ratio);

Features extract_features(const Image& image, const SiftParams& params);
std::size_t match_count(const Image& a, const Image& b, const SiftParams& params);

double descriptor_distance(const Descriptor& a, const Descriptor& b);

/// Debug dump: [{x, y, sigma, orientation}, ...].
nlohmann::json keypoints_to_json(std::span<const Keypoint> keypoints);

}  // namespace xdetect::sift
