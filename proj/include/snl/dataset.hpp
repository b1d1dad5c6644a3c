#pragma once
// Aligned (image, CIR, label, ToA) samples, route splits, few-shot subsets and
// the "SNLD" on-disk format.
//
// SNLD layout (little-endian):
//   "SNLD" | u32 version | u32 g | u32 H | u64 count
//   | f32 cir_mean[2] | f32 cir_std[2] | u32 meta_len | meta (UTF-8 JSON)
//   then `count` records of
//   f64 uav_pos[3] | u32 route | u32 index | f32 image[3*H*H]
//   | f32 cir[2*g*g] (real plane, imaginary plane) | u8 labels[g*g] | f64 toa[g*g]

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "snl/binary_io.hpp"
#include "snl/channel.hpp"
#include "snl/error.hpp"
#include "snl/scene.hpp"
#include "snl/sensing.hpp"

namespace snl {

inline constexpr std::uint32_t kDatasetVersion = 1;

struct Sample {
  Image image;
  CirMatrix cir;
  LabelGrid labels;
  ToaGrid toa;
  Vec3 uav_pos;
  int route_id = 0;
  int snapshot_index = 0;
};

struct CirStats {
  float mean[2]{0.0f, 0.0f};
  float std[2]{1.0f, 1.0f};
};

struct DatasetMeta {
  std::string scenario;
  double altitude_m = 0.0;
  double frequency_hz = 0.0;
  int g = 0;
  double grid_side_m = 0.0;
  double meters_per_pixel = 0.0;
  bool normalized = false;
};

struct Dataset {
  std::vector<Sample> samples;
  CirStats normalization;
  DatasetMeta meta;
  int image_resolution = 0;

  std::vector<int> route_ids() const {
    std::vector<int> ids;
    for (const auto& s : samples)
      if (std::find(ids.begin(), ids.end(), s.route_id) == ids.end()) ids.push_back(s.route_id);
    std::sort(ids.begin(), ids.end());
    return ids;
  }
};

struct Split {
  std::vector<std::size_t> train_ids;
  std::vector<std::size_t> test_ids;
  std::string warning;  // non-empty for degenerate splits
};

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is handled
// by exactly one worker, so results written per index are deterministic.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline Sample make_sample(const Snapshot& snap, const Scenario& scenario, const CameraSpec& cam,
                          const ChannelConfig& channel_cfg) {
  Sample s;
  s.image = render(snap, scenario, cam);
  auto grids = simulate_channel(snap, scenario, channel_cfg);
  s.cir = std::move(grids.cir);
  s.labels = std::move(grids.labels);
  s.toa = std::move(grids.toa);
  s.uav_pos = snap.uav_pos;
  s.route_id = snap.route_id;
  s.snapshot_index = snap.index;
  return s;
}

// One sample per snapshot per route, routes in id order, every route flown at
// `altitude`.
inline Dataset generate_dataset(const Scenario& scenario, double altitude, const CameraSpec& cam,
                                const ChannelConfig& channel_cfg, int threads = 1) {
  if (!(altitude > 0.0) || !std::isfinite(altitude)) throw ConfigError("altitude must be positive");
  if (cam.footprint_side < scenario.grid.side) throw ConfigError("camera footprint smaller than receiver grid");
  Scenario flown = scenario;
  for (auto& r : flown.routes)
    for (auto& w : r.waypoints) w.z = altitude;

  std::vector<Snapshot> snaps;
  for (const auto& r : flown.routes) {
    auto s = trajectory_snapshots(flown, r.id);
    snaps.insert(snaps.end(), s.begin(), s.end());
  }

  Dataset ds;
  ds.samples.resize(snaps.size());
  parallel_for(snaps.size(), threads,
               [&](std::size_t i) { ds.samples[i] = make_sample(snaps[i], flown, cam, channel_cfg); });
  ds.meta.scenario = to_string(scenario.name);
  ds.meta.altitude_m = altitude;
  ds.meta.frequency_hz = channel_cfg.freq_hz;
  ds.meta.g = scenario.grid.g;
  ds.meta.grid_side_m = scenario.grid.side;
  ds.meta.meters_per_pixel = cam.footprint_side / cam.resolution;
  ds.image_resolution = cam.resolution;
  return ds;
}

// Receiver lattice of a sample: centered at the UAV nadir on the ground.
inline RxGrid sample_grid(const Sample& s, const DatasetMeta& meta) {
  return RxGrid{{s.uav_pos.x, s.uav_pos.y, 0.0}, meta.grid_side_m, meta.g};
}

inline double los_fraction(const Dataset& ds) {
  std::size_t ones = 0, total = 0;
  for (const auto& s : ds.samples) {
    for (auto v : s.labels.values) ones += v;
    total += s.labels.values.size();
  }
  return total ? static_cast<double>(ones) / static_cast<double>(total) : 0.0;
}

inline Split split_by_route(const Dataset& ds, int test_route) {
  const auto routes = ds.route_ids();
  if (std::find(routes.begin(), routes.end(), test_route) == routes.end())
    throw NotFoundError("route " + std::to_string(test_route) + " not in dataset");
  Split split;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    (ds.samples[i].route_id == test_route ? split.test_ids : split.train_ids).push_back(i);
  if (split.train_ids.empty()) split.warning = "training split is empty";
  return split;
}

// Uniform sample of k ids from `pool` without replacement, returned sorted.
inline std::vector<std::size_t> few_shot_subset(const std::vector<std::size_t>& pool, int k, std::uint64_t seed) {
  if (k < 0 || static_cast<std::size_t>(k) > pool.size())
    throw DomainError("few-shot k must lie in [0, " + std::to_string(pool.size()) + "]");
  std::vector<std::size_t> ids = pool;
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(static_cast<std::size_t>(k));
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Applies stored statistics to another dataset (e.g. a target scenario
// evaluated by a model trained elsewhere).
inline Dataset apply_cir_normalization(const Dataset& ds, const CirStats& stats) {
  Dataset out = ds;
  for (auto& s : out.samples)
    for (std::size_t i = 0; i < s.cir.re.size(); ++i) {
      s.cir.re[i] = static_cast<float>((s.cir.re[i] - static_cast<double>(stats.mean[0])) / stats.std[0]);
      s.cir.im[i] = static_cast<float>((s.cir.im[i] - static_cast<double>(stats.mean[1])) / stats.std[1]);
    }
  out.normalization = stats;
  out.meta.normalized = true;
  return out;
}

// Per-channel standardization with statistics from the training split only.
inline Dataset normalize_cir(const Dataset& ds, const Split& split) {
  double sum[2]{0.0, 0.0}, sq[2]{0.0, 0.0};
  std::size_t count = 0;
  for (auto id : split.train_ids) {
    const auto& c = ds.samples.at(id).cir;
    for (std::size_t i = 0; i < c.re.size(); ++i) {
      sum[0] += c.re[i];
      sum[1] += c.im[i];
      sq[0] += static_cast<double>(c.re[i]) * c.re[i];
      sq[1] += static_cast<double>(c.im[i]) * c.im[i];
    }
    count += c.re.size();
  }
  double mean[2]{0.0, 0.0}, stdev[2]{1.0, 1.0};
  if (count > 0)
    for (int ch = 0; ch < 2; ++ch) {
      mean[ch] = sum[ch] / static_cast<double>(count);
      const double var = std::max(0.0, sq[ch] / static_cast<double>(count) - mean[ch] * mean[ch]);
      stdev[ch] = std::max(std::sqrt(var), 1e-12);
    }

  CirStats stats;
  for (int ch = 0; ch < 2; ++ch) {
    stats.mean[ch] = static_cast<float>(mean[ch]);
    stats.std[ch] = static_cast<float>(stdev[ch]);
  }
  return apply_cir_normalization(ds, stats);
}

inline nlohmann::json meta_to_json(const DatasetMeta& m) {
  return {{"scenario", m.scenario},   {"altitude_m", m.altitude_m},           {"frequency_hz", m.frequency_hz},
          {"g", m.g},                 {"grid_side_m", m.grid_side_m},         {"meters_per_pixel", m.meters_per_pixel},
          {"normalized", m.normalized}};
}

inline void save(const Dataset& ds, std::ostream& os) {
  const auto g = static_cast<std::uint32_t>(ds.meta.g);
  const auto h = static_cast<std::uint32_t>(ds.image_resolution);
  const std::size_t cells = static_cast<std::size_t>(g) * g;
  const std::size_t pixels = static_cast<std::size_t>(3) * h * h;
  os.write("SNLD", 4);
  io::write<std::uint32_t>(os, kDatasetVersion);
  io::write<std::uint32_t>(os, g);
  io::write<std::uint32_t>(os, h);
  io::write<std::uint64_t>(os, ds.samples.size());
  for (int ch = 0; ch < 2; ++ch) io::write<float>(os, ds.normalization.mean[ch]);
  for (int ch = 0; ch < 2; ++ch) io::write<float>(os, ds.normalization.std[ch]);
  io::write_string(os, meta_to_json(ds.meta).dump());
  for (const auto& s : ds.samples) {
    if (s.image.data.size() != pixels || s.cir.re.size() != cells || s.cir.im.size() != cells ||
        s.labels.values.size() != cells || s.toa.values.size() != cells)
      throw FormatError("sample shape does not match dataset header");
    io::write<double>(os, s.uav_pos.x);
    io::write<double>(os, s.uav_pos.y);
    io::write<double>(os, s.uav_pos.z);
    io::write<std::uint32_t>(os, static_cast<std::uint32_t>(s.route_id));
    io::write<std::uint32_t>(os, static_cast<std::uint32_t>(s.snapshot_index));
    io::write_array(os, s.image.data.data(), pixels);
    io::write_array(os, s.cir.re.data(), cells);
    io::write_array(os, s.cir.im.data(), cells);
    io::write_array(os, s.labels.values.data(), cells);
    io::write_array(os, s.toa.values.data(), cells);
  }
  if (!os) throw Error("write failed");
}

inline void save(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  save(ds, os);
}

inline Dataset load_dataset(std::istream& is) {
  io::expect_magic(is, "SNLD");
  const auto version = io::read<std::uint32_t>(is);
  if (version != kDatasetVersion) throw FormatError("unsupported SNLD version " + std::to_string(version));
  const auto g = io::read<std::uint32_t>(is);
  const auto h = io::read<std::uint32_t>(is);
  const auto count = io::read<std::uint64_t>(is);
  if (g > 4096 || h > 16384) throw FormatError("implausible SNLD dimensions");
  Dataset ds;
  for (int ch = 0; ch < 2; ++ch) ds.normalization.mean[ch] = io::read<float>(is);
  for (int ch = 0; ch < 2; ++ch) ds.normalization.std[ch] = io::read<float>(is);
  try {
    const auto meta = nlohmann::json::parse(io::read_string(is));
    ds.meta.scenario = meta.at("scenario").get<std::string>();
    ds.meta.altitude_m = meta.at("altitude_m").get<double>();
    ds.meta.frequency_hz = meta.at("frequency_hz").get<double>();
    ds.meta.g = meta.at("g").get<int>();
    ds.meta.grid_side_m = meta.at("grid_side_m").get<double>();
    ds.meta.meters_per_pixel = meta.at("meters_per_pixel").get<double>();
    ds.meta.normalized = meta.at("normalized").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad SNLD metadata: ") + e.what());
  }
  if (ds.meta.g != static_cast<int>(g)) throw FormatError("metadata grid size disagrees with header");
  ds.image_resolution = static_cast<int>(h);

  const std::size_t cells = static_cast<std::size_t>(g) * g;
  const std::size_t pixels = static_cast<std::size_t>(3) * h * h;
  for (std::uint64_t k = 0; k < count; ++k) {
    Sample s;
    s.uav_pos.x = io::read<double>(is);
    s.uav_pos.y = io::read<double>(is);
    s.uav_pos.z = io::read<double>(is);
    s.route_id = static_cast<int>(io::read<std::uint32_t>(is));
    s.snapshot_index = static_cast<int>(io::read<std::uint32_t>(is));
    s.image.resolution = static_cast<int>(h);
    s.image.meters_per_pixel = ds.meta.meters_per_pixel;
    s.image.data.resize(pixels);
    io::read_array(is, s.image.data.data(), pixels);
    s.cir = {static_cast<int>(g), std::vector<float>(cells), std::vector<float>(cells)};
    io::read_array(is, s.cir.re.data(), cells);
    io::read_array(is, s.cir.im.data(), cells);
    s.labels = {static_cast<int>(g), std::vector<std::uint8_t>(cells)};
    io::read_array(is, s.labels.values.data(), cells);
    for (auto v : s.labels.values)
      if (v > 1) throw FormatError("label outside {0, 1}");
    s.toa = {static_cast<int>(g), std::vector<double>(cells)};
    io::read_array(is, s.toa.values.data(), cells);
    ds.samples.push_back(std::move(s));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after last record");
  return ds;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset " + path);
  return load_dataset(is);
}

}  // namespace snl
