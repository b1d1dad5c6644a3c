#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "support/oracles.hpp"

using namespace snl;
using namespace snl::testing;

namespace {

Snapshot nadir(Vec3 uav, GridSpec grid) { return Snapshot{uav, 1, 0, RxGrid{{uav.x, uav.y, 0}, grid.side, grid.g}}; }

}  // namespace

TEST(Render, EmptySceneIsUniformGray) {
  Scenario sc;
  const Image img = render(nadir({0, 0, 60}, {}), sc, CameraSpec{});
  ASSERT_EQ(img.data.size(), 3u * 96 * 96);
  for (float v : img.data) EXPECT_EQ(v, 0.5f);
}

TEST(Render, TallestBuildingSaturatesChannelZero) {
  Scenario sc;
  sc.buildings = {{{-10, -10, 0}, {10, 10, 40}, 0}, {{30, 30, 0}, {50, 50, 20}, 1}};
  const Snapshot snap = nadir({0, 0, 60}, {});
  const Image img = render(snap, sc, CameraSpec{});
  const auto [r, c] = pixel_of(img, snap, {0, 0, 0});
  EXPECT_EQ(img.at(0, r, c), 1.0f);
  const auto [r2, c2] = pixel_of(img, snap, {40, 40, 0});
  EXPECT_FLOAT_EQ(img.at(0, r2, c2), 0.5f);
  for (float v : img.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Render, ResolutionBelow32IsConfigError) {
  EXPECT_THROW(render(nadir({0, 0, 60}, {}), Scenario{}, CameraSpec{150, 31}), ConfigError);
}

TEST(Render, DeterministicAndInRange) {
  const Scenario sc = build_scenario(ScenarioSpec::crossroad());
  const Snapshot snap = trajectory_snapshots(sc, 2)[7];
  const CameraSpec cam = CameraSpec::for_grid(sc.grid, 96);
  const Image a = render(snap, sc, cam);
  const Image b = render(snap, sc, cam);
  EXPECT_EQ(a.data, b.data);
  for (float v : a.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Render, ReceiverPixelsAlignWithGridCells) {
  const Scenario sc = build_scenario(ScenarioSpec::crossroad());
  for (int g : {5, 30}) {
    GridSpec grid{150.0, g};
    const CameraSpec cam = CameraSpec::for_grid(grid, 96);
    const Snapshot snap = nadir({100, 130, 63.3}, grid);
    const Image img = render(snap, sc, cam);
    const auto rx = rx_positions(snap.grid);
    for (int r = 0; r < g; ++r)
      for (int c = 0; c < g; ++c) {
        const auto [pr, pc] = pixel_of(img, snap, rx[static_cast<std::size_t>(r * g + c)]);
        // Affine footprint -> grid map of the pixel centre.
        const double cell_r = (pr + 0.5) * g / img.resolution - 0.5;
        const double cell_c = (pc + 0.5) * g / img.resolution - 0.5;
        const double pixel_in_cells = static_cast<double>(g) / img.resolution;
        EXPECT_LE(std::abs(cell_r - r), pixel_in_cells);
        EXPECT_LE(std::abs(cell_c - c), pixel_in_cells);
      }
  }
}

TEST(Noise, ZeroVarianceIsIdentity) {
  const Scenario sc = build_scenario(ScenarioSpec::crossroad());
  const Image img = render(trajectory_snapshots(sc, 1)[0], sc, CameraSpec{});
  EXPECT_EQ(add_gaussian_noise(img, 0.0, 9).data, img.data);
  EXPECT_THROW(add_gaussian_noise(img, -0.1, 9), DomainError);
}

TEST(Noise, FieldVarianceAndMean) {
  const std::size_t n = 1'200'000;
  const auto field = gaussian_noise_field(n, 0.35, 2024);
  double sum = 0.0, sq = 0.0;
  for (double v : field) sum += v, sq += v * v;
  const double mean = sum / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  EXPECT_NEAR(var, 0.35, 0.01);
  EXPECT_LT(std::abs(mean), 3.0 * std::sqrt(0.35 / static_cast<double>(n)));
}

TEST(Noise, AppliedNoiseIsTheClampedField) {
  Image img;
  img.resolution = 32;
  img.data.assign(3 * 32 * 32, 0.5f);
  const Image noisy = add_gaussian_noise(img, 0.35, 77);
  const auto field = gaussian_noise_field(img.data.size(), 0.35, 77);
  int clamped = 0;
  for (std::size_t i = 0; i < field.size(); ++i) {
    const double expect = std::clamp(0.5 + field[i], 0.0, 1.0);
    EXPECT_EQ(noisy.data[i], static_cast<float>(expect));
    clamped += (expect == 0.0 || expect == 1.0) ? 1 : 0;
  }
  EXPECT_GT(clamped, 0);
  EXPECT_EQ(add_gaussian_noise(img, 0.35, 77).data, noisy.data);
  EXPECT_NE(add_gaussian_noise(img, 0.35, 78).data, noisy.data);
}

TEST(Ppm, HeaderAndSize) {
  Image img;
  img.resolution = 32;
  img.data.assign(3 * 32 * 32, 1.0f);
  const auto path = std::filesystem::temp_directory_path() / "snl_test.ppm";
  write_ppm(img, path.string());
  std::ifstream is(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  is >> magic >> w >> h >> maxv;
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(w, 32);
  EXPECT_EQ(h, 32);
  EXPECT_EQ(maxv, 255);
  EXPECT_EQ(std::filesystem::file_size(path), 13u + 3u * 32 * 32);
  std::filesystem::remove(path);
}
