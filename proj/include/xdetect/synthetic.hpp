#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "xdetect/core.hpp"
#include "xdetect/imaging.hpp"

// Procedural scenes with exact ground truth: each class is a hue plus a
// fixed blob-and-bar texture drawn inside an ellipse, placed on a uniform
// dark background. Instances differ by pose, scale, brightness and sensor
// noise, so SIFT sees the same texture under similarity transforms.
namespace xdetect::synth {

struct TextureBlob {
  double u = 0, v = 0;      // center in object coordinates, [-1,1]^2
  double radius = 0;        // object units
  double amplitude = 0;
};

struct TextureBar {
  double u = 0, v = 0, half_len = 0, half_wid = 0, angle = 0, amplitude = 0;
};

struct ClassAppearance {
  std::string name;
  double hue_deg = 0;
  double aspect = 1.0;  // x radius / y radius
  std::vector<TextureBlob> blobs;
  std::vector<TextureBar> bars;
};

struct World {
  ClassRegistry registry;
  std::vector<ClassAppearance> classes;
  double background = 0.1;
  double saturation = 0.45;
  double object_radius = 44.0;  // pixels at scale 1
};

/// `n_classes` appearances with evenly spaced hues and seed-derived textures.
World make_world(int n_classes, std::uint64_t seed);

struct InstancePose {
  double cx = 0, cy = 0;
  double scale = 1.0;
  double rotation_deg = 0.0;
  double brightness = 1.0;
  std::uint64_t noise_seed = 0;
  double noise_sigma = 0.01;
};

struct Scene {
  Image image;
  Annotation annotation;
  Mask object_mask;
};

/// Optional override: draw class `texture_class`'s texture in `class_id`'s hue.
Scene render(const World& world, ClassId class_id, const InstancePose& pose, int width, int height,
             std::optional<ClassId> texture_class = std::nullopt);

/// Pose sampled uniformly: scale [0.9,1.1], rotation [-15,15] deg,
/// brightness [0.9,1.05], center kept at least one object radius from borders.
InstancePose random_pose(const World& world, std::mt19937_64& rng, int width, int height);

/// Object-centric prototype view: square canvas, centered, mild pose jitter.
Scene render_prototype(const World& world, ClassId class_id, std::mt19937_64& rng, int side = 136);

/// Full-frame gray blob texture, values kept within [0.15, 0.85].
Image textured_image(int width, int height, std::uint64_t seed);
/// Gray image with one isotropic Gaussian blob (peak 0.5 above 0.25 base).
Image gaussian_blob_image(int width, int height, double cx, double cy, double sigma);
Image checkerboard(int width, int height, int cell);

/// Pastes a high-texture random square block over the object at (cx,cy).
Image add_decal(const Image& scene, int cx, int cy, int side, std::uint64_t seed);

std::vector<double> hue_to_rgb(double hue_deg);
double rgb_hue(double r, double g, double b);

}  // namespace xdetect::synth
