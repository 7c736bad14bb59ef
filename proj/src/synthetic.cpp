#include "xdetect/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/core.h>
#include <numbers>

namespace xdetect::synth {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

double texture_value(const ClassAppearance& app, double u, double v) {
  double val = 0.62;
  for (const auto& b : app.blobs) {
    const double du = u - b.u, dv = v - b.v;
    const double d2 = du * du + dv * dv;
    if (d2 > 16 * b.radius * b.radius) continue;
    val += b.amplitude * std::exp(-0.5 * d2 / (b.radius * b.radius));
  }
  for (const auto& bar : app.bars) {
    const double du = u - bar.u, dv = v - bar.v;
    const double cs = std::cos(bar.angle), sn = std::sin(bar.angle);
    const double a = cs * du + sn * dv;
    const double c = -sn * du + cs * dv;
    if (std::abs(a) <= bar.half_len && std::abs(c) <= bar.half_wid) val += bar.amplitude;
  }
  return std::clamp(val, 0.3, 1.0);
}

}  // namespace

std::vector<double> hue_to_rgb(double hue_deg) {
  double h = std::fmod(hue_deg, 360.0);
  if (h < 0) h += 360.0;
  const double x = 1.0 - std::abs(std::fmod(h / 60.0, 2.0) - 1.0);
  if (h < 60) return {1, x, 0};
  if (h < 120) return {x, 1, 0};
  if (h < 180) return {0, 1, x};
  if (h < 240) return {0, x, 1};
  if (h < 300) return {x, 0, 1};
  return {1, 0, x};
}

double rgb_hue(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  if (d <= 0) return 0.0;
  double h;
  if (mx == r) {
    h = 60.0 * std::fmod((g - b) / d, 6.0);
  } else if (mx == g) {
    h = 60.0 * ((b - r) / d + 2.0);
  } else {
    h = 60.0 * ((r - g) / d + 4.0);
  }
  if (h < 0) h += 360.0;
  return h;
}

World make_world(int n_classes, std::uint64_t seed) {
  if (n_classes < 1) throw ConfigError("synthetic world needs at least one class");
  World world;
  std::vector<std::string> names;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(-0.85, 0.85);
  std::uniform_real_distribution<double> radius(0.05, 0.12);
  std::uniform_real_distribution<double> amp(0.25, 0.45);
  std::uniform_real_distribution<double> aspect(0.8, 1.25);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::uniform_real_distribution<double> bar_len(0.08, 0.22);
  std::uniform_real_distribution<double> bar_wid(0.03, 0.06);
  std::bernoulli_distribution sign(0.5);
  for (int c = 0; c < n_classes; ++c) {
    ClassAppearance app;
    app.name = fmt::format("class{:02d}", c);
    app.hue_deg = 360.0 * c / n_classes;
    app.aspect = aspect(rng);
    for (int i = 0; i < 90; ++i) {
      app.blobs.push_back({pos(rng), pos(rng), radius(rng), (sign(rng) ? 1.0 : -1.0) * amp(rng)});
    }
    for (int i = 0; i < 6; ++i) {
      app.bars.push_back({pos(rng), pos(rng), bar_len(rng), bar_wid(rng), angle(rng),
                          (sign(rng) ? 1.0 : -1.0) * amp(rng)});
    }
    names.push_back(app.name);
    world.classes.push_back(std::move(app));
  }
  world.registry = ClassRegistry(std::move(names));
  return world;
}

Scene render(const World& world, ClassId class_id, const InstancePose& pose, int width, int height,
             std::optional<ClassId> texture_class) {
  if (!world.registry.contains(class_id)) throw ValidationError(fmt::format("unknown class {}", class_id));
  const ClassAppearance& hue_app = world.classes[static_cast<std::size_t>(class_id)];
  const ClassAppearance& tex_app = world.classes[static_cast<std::size_t>(texture_class.value_or(class_id))];
  const auto hue = hue_to_rgb(hue_app.hue_deg);
  double color[3];
  for (int ch = 0; ch < 3; ++ch) color[ch] = (1.0 - world.saturation) + world.saturation * hue[ch];

  const double rx = world.object_radius * pose.scale * std::sqrt(tex_app.aspect);
  const double ry = world.object_radius * pose.scale / std::sqrt(tex_app.aspect);
  const double cs = std::cos(pose.rotation_deg * kDeg), sn = std::sin(pose.rotation_deg * kDeg);

  std::mt19937_64 noise_rng(pose.noise_seed);
  std::normal_distribution<double> noise(0.0, pose.noise_sigma);

  std::vector<double> data(static_cast<std::size_t>(width) * height * 3);
  Mask mask(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double dx = x - pose.cx, dy = y - pose.cy;
      // object frame: undo the pose rotation, then normalize by the radii
      const double ou = (cs * dx + sn * dy) / rx;
      const double ov = (-sn * dx + cs * dy) / ry;
      double* px = &data[(static_cast<std::size_t>(y) * width + x) * 3];
      if (ou * ou + ov * ov <= 1.0) {
        mask.at(y, x) = 1;
        const double val = texture_value(tex_app, ou, ov) * pose.brightness;
        for (int ch = 0; ch < 3; ++ch) px[ch] = val * color[ch];
      } else {
        for (int ch = 0; ch < 3; ++ch) px[ch] = world.background;
      }
    }
  }
  if (pose.noise_sigma > 0) {
    for (double& v : data) v += noise(noise_rng);
  }

  Scene scene;
  scene.image = Image::clipped(height, width, 3, std::move(data));
  scene.annotation.label_id = class_id;
  scene.annotation.label_name = world.registry.name(class_id);
  scene.annotation.bbox = mask_bbox(mask).value_or(BBox{0, 0, static_cast<double>(width), static_cast<double>(height)});
  scene.object_mask = std::move(mask);
  return scene;
}

InstancePose random_pose(const World& world, std::mt19937_64& rng, int width, int height) {
  const double margin = world.object_radius * 1.35;
  if (width < 2 * margin + 1 || height < 2 * margin + 1) {
    throw ConfigError(fmt::format("{}x{} canvas too small for synthetic objects", width, height));
  }
  InstancePose pose;
  pose.cx = std::uniform_real_distribution<double>(margin, width - margin)(rng);
  pose.cy = std::uniform_real_distribution<double>(margin, height - margin)(rng);
  pose.scale = std::uniform_real_distribution<double>(0.9, 1.1)(rng);
  pose.rotation_deg = std::uniform_real_distribution<double>(-15.0, 15.0)(rng);
  pose.brightness = std::uniform_real_distribution<double>(0.9, 1.05)(rng);
  pose.noise_seed = rng();
  return pose;
}

Scene render_prototype(const World& world, ClassId class_id, std::mt19937_64& rng, int side) {
  InstancePose pose;
  pose.cx = pose.cy = 0.5 * (side - 1);
  pose.scale = std::uniform_real_distribution<double>(0.95, 1.05)(rng);
  pose.rotation_deg = std::uniform_real_distribution<double>(-10.0, 10.0)(rng);
  pose.brightness = std::uniform_real_distribution<double>(0.92, 1.02)(rng);
  pose.noise_seed = rng();
  return render(world, class_id, pose, side, side);
}

Image textured_image(int width, int height, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int n = std::max(8, width * height / 120);
  std::uniform_real_distribution<double> ux(0, width), uy(0, height), rad(2.0, 5.0), amp(0.25, 0.45);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> data(static_cast<std::size_t>(width) * height, 0.5);
  for (int i = 0; i < n; ++i) {
    const double bx = ux(rng), by = uy(rng), r = rad(rng), a = (sign(rng) ? 1 : -1) * amp(rng);
    const int x0 = std::max(0, static_cast<int>(bx - 4 * r)), x1 = std::min(width - 1, static_cast<int>(bx + 4 * r));
    const int y0 = std::max(0, static_cast<int>(by - 4 * r)), y1 = std::min(height - 1, static_cast<int>(by + 4 * r));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
        data[static_cast<std::size_t>(y) * width + x] += a * std::exp(-0.5 * d2 / (r * r));
      }
    }
  }
  for (double& v : data) v = std::clamp(v, 0.15, 0.85);
  return Image(height, width, 1, std::move(data));
}

Image gaussian_blob_image(int width, int height, double cx, double cy, double sigma) {
  std::vector<double> data(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      data[static_cast<std::size_t>(y) * width + x] = 0.25 + 0.5 * std::exp(-0.5 * d2 / (sigma * sigma));
    }
  }
  return Image(height, width, 1, std::move(data));
}

Image checkerboard(int width, int height, int cell) {
  std::vector<double> data(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      data[static_cast<std::size_t>(y) * width + x] = ((x / cell + y / cell) % 2) ? 0.8 : 0.2;
    }
  }
  return Image(height, width, 1, std::move(data));
}

Image add_decal(const Image& scene, int cx, int cy, int side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> val(0.3, 1.0);
  const int c = scene.channels();
  std::vector<double> data(scene.data().begin(), scene.data().end());
  constexpr int kCell = 4;
  const int x0 = cx - side / 2, y0 = cy - side / 2;
  std::vector<double> cells;
  const int n_cells = (side + kCell - 1) / kCell;
  for (int i = 0; i < n_cells * n_cells * c; ++i) cells.push_back(val(rng));
  for (int y = std::max(0, y0); y < std::min(scene.height(), y0 + side); ++y) {
    for (int x = std::max(0, x0); x < std::min(scene.width(), x0 + side); ++x) {
      const int cell = ((y - y0) / kCell) * n_cells + (x - x0) / kCell;
      for (int ch = 0; ch < c; ++ch) {
        data[(static_cast<std::size_t>(y) * scene.width() + x) * c + ch] = cells[static_cast<std::size_t>(cell) * c + ch];
      }
    }
  }
  return Image(scene.height(), scene.width(), c, std::move(data));
}

}  // namespace xdetect::synth
