#pragma once
// Synthetic nadir camera: orthographic top-down raster of the ground beneath
// the UAV, plus Gaussian image perturbation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "snl/error.hpp"
#include "snl/scene.hpp"

namespace snl {

// Channel-major 3 x H x H raster with values in [0, 1]. Pixel (0, 0) is the
// north-west corner: rows grow along +x (south), columns along +y (east).
struct Image {
  int resolution = 0;
  double meters_per_pixel = 0.0;
  std::vector<float> data;

  float& at(int ch, int row, int col) {
    return data[(static_cast<std::size_t>(ch) * resolution + row) * resolution + col];
  }
  float at(int ch, int row, int col) const {
    return data[(static_cast<std::size_t>(ch) * resolution + row) * resolution + col];
  }
};

struct CameraSpec {
  double footprint_side = 150.0 * 30.0 / 29.0;
  int resolution = 96;

  // Footprint whose pixels tile the receiver cells exactly: each of the g
  // cells is side / (g - 1) wide and centred on its receiver.
  static CameraSpec for_grid(const GridSpec& grid, int resolution) {
    return {grid.side * grid.g / (grid.g - 1), resolution};
  }
};

inline constexpr float kGroundGray = 0.5f;
inline constexpr float kStreetGray = 0.2f;

namespace detail {

inline float hue_component(int id, int which) {
  // Fixed integer hash mapped into [0.3, 1.0].
  std::uint32_t h = static_cast<std::uint32_t>(id) * 2654435761u + static_cast<std::uint32_t>(which) * 40503u;
  h ^= h >> 15;
  h *= 2246822519u;
  h ^= h >> 13;
  return 0.3f + 0.7f * static_cast<float>(h % 1000u) / 999.0f;
}

}  // namespace detail

inline Image render(const Snapshot& snapshot, const Scenario& scenario, const CameraSpec& cam) {
  if (cam.resolution < 32) throw ConfigError("camera resolution must be >= 32");
  if (!(cam.footprint_side > 0.0)) throw ConfigError("camera footprint must be positive");
  const int n = cam.resolution;
  Image img;
  img.resolution = n;
  img.meters_per_pixel = cam.footprint_side / n;
  img.data.assign(static_cast<std::size_t>(3) * n * n, kGroundGray);

  const double x0 = snapshot.uav_pos.x - cam.footprint_side / 2.0;
  const double y0 = snapshot.uav_pos.y - cam.footprint_side / 2.0;
  const double h_max = scenario.max_height();
  for (int row = 0; row < n; ++row) {
    const double gx = x0 + (row + 0.5) * img.meters_per_pixel;
    for (int col = 0; col < n; ++col) {
      const double gy = y0 + (col + 0.5) * img.meters_per_pixel;
      const Building* top = nullptr;
      for (const auto& b : scenario.buildings) {
        const bool hit = gx >= b.min_corner.x && gx < b.max_corner.x && gy >= b.min_corner.y && gy < b.max_corner.y;
        if (hit && (top == nullptr || b.height() > top->height())) top = &b;
      }
      if (top != nullptr) {
        img.at(0, row, col) = static_cast<float>(top->height() / h_max);
        img.at(1, row, col) = detail::hue_component(top->height_color_id, 1);
        img.at(2, row, col) = detail::hue_component(top->height_color_id, 2);
        continue;
      }
      const bool street = std::any_of(scenario.streets.begin(), scenario.streets.end(),
                                      [&](const Rect& r) { return r.contains(gx, gy); });
      if (street)
        for (int ch = 0; ch < 3; ++ch) img.at(ch, row, col) = kStreetGray;
    }
  }
  return img;
}

// Pixel (row, col) that contains a ground point, or {-1, -1} when outside.
inline std::pair<int, int> pixel_of(const Image& img, const Snapshot& snapshot, const Vec3& ground) {
  const double side = img.meters_per_pixel * img.resolution;
  const double fx = (ground.x - (snapshot.uav_pos.x - side / 2.0)) / img.meters_per_pixel;
  const double fy = (ground.y - (snapshot.uav_pos.y - side / 2.0)) / img.meters_per_pixel;
  const int row = static_cast<int>(std::floor(fx));
  const int col = static_cast<int>(std::floor(fy));
  if (row < 0 || col < 0 || row >= img.resolution || col >= img.resolution) return {-1, -1};
  return {row, col};
}

// Zero-mean i.i.d. Gaussian samples with the given variance; the exact field
// that add_gaussian_noise adds for the same (count, variance, seed).
inline std::vector<double> gaussian_noise_field(std::size_t count, double variance, std::uint64_t seed) {
  if (variance < 0.0 || !std::isfinite(variance)) throw DomainError("noise variance must be >= 0");
  std::vector<double> out(count, 0.0);
  if (variance == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(variance));
  for (auto& v : out) v = dist(rng);
  return out;
}

inline Image add_gaussian_noise(const Image& img, double variance, std::uint64_t seed) {
  const auto noise = gaussian_noise_field(img.data.size(), variance, seed);
  Image out = img;
  if (variance == 0.0) return out;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<float>(std::clamp(static_cast<double>(img.data[i]) + noise[i], 0.0, 1.0));
  return out;
}

// Binary PPM (P6, 8-bit).
inline void write_ppm(const Image& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  const int n = img.resolution;
  os << "P6\n" << n << " " << n << "\n255\n";
  for (int row = 0; row < n; ++row)
    for (int col = 0; col < n; ++col)
      for (int ch = 0; ch < 3; ++ch) {
        const float v = std::clamp(img.at(ch, row, col), 0.0f, 1.0f);
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
      }
}

}  // namespace snl
