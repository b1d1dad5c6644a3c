#pragma once
// Procedural urban scenarios, UAV trajectories and the ground receiver grid.
//
// World frame: +x points south, +y points east, +z is up (right-handed). With
// this choice the receiver grid index (r, c) and the nadir image pixel
// (row, col) grow along the same ground axes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "snl/error.hpp"

namespace snl {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  constexpr double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  constexpr double& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }

  friend constexpr Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend constexpr Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend constexpr Vec3 operator*(Vec3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend constexpr Vec3 operator*(double s, Vec3 a) { return a * s; }
  friend constexpr bool operator==(const Vec3&, const Vec3&) = default;

  double norm() const { return std::sqrt(x * x + y * y + z * z); }
  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

inline double distance(Vec3 a, Vec3 b) { return (a - b).norm(); }

// Axis-aligned building standing on the ground plane.
struct Building {
  Vec3 min_corner;
  Vec3 max_corner;
  int height_color_id = 0;

  double height() const { return max_corner.z; }
  // Strict interior of the footprint, shrunk by `tol`.
  bool footprint_contains(double px, double py, double tol = 0.0) const {
    return px > min_corner.x + tol && px < max_corner.x - tol && py > min_corner.y + tol &&
           py < max_corner.y - tol;
  }
};

// Ground rectangle; used for street corridors.
struct Rect {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  bool contains(double px, double py) const { return px >= x0 && px < x1 && py >= y0 && py < y1; }
};

enum class ScenarioKind { Crossroad, WideLane };

inline std::string to_string(ScenarioKind kind) {
  return kind == ScenarioKind::Crossroad ? "crossroad" : "wide_lane";
}

inline ScenarioKind scenario_kind_from_string(const std::string& name) {
  if (name == "crossroad") return ScenarioKind::Crossroad;
  if (name == "wide_lane" || name == "widelane" || name == "wide-lane") return ScenarioKind::WideLane;
  throw ConfigError("unknown scenario template '" + name + "'");
}

struct GridSpec {
  double side = 150.0;
  int g = 30;
};

struct RxGrid {
  Vec3 center;
  double side = 150.0;
  int g = 30;
};

struct Trajectory {
  int id = 0;
  std::vector<Vec3> waypoints;
  int snapshot_count = 1;
};

struct Snapshot {
  Vec3 uav_pos;
  int route_id = 0;
  int index = 0;
  RxGrid grid;
};

struct RouteSpec {
  std::vector<Vec3> waypoints;
  int snapshots = 1;
};

// Inputs to build_scenario. Empty `routes` selects the template's routes
// flown at `altitude`.
struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::Crossroad;
  double width = 200.0;
  double depth = 260.0;
  int building_count = 19;
  double street_width = 16.0;
  std::uint64_t seed = 7;
  double altitude = 63.3;
  // Overrides every template route's snapshot count when > 0.
  int snapshots_per_route = 0;
  std::vector<RouteSpec> routes;
  GridSpec grid;

  static ScenarioSpec crossroad() { return {}; }

  static ScenarioSpec wide_lane() {
    ScenarioSpec s;
    s.kind = ScenarioKind::WideLane;
    s.width = 260.0;
    s.depth = 260.0;
    s.building_count = 40;
    s.street_width = 10.0;
    s.altitude = 200.0;
    return s;
  }
};

struct Scenario {
  ScenarioKind name = ScenarioKind::Crossroad;
  double width = 0.0;
  double depth = 0.0;
  std::vector<Building> buildings;
  std::vector<Rect> streets;
  std::vector<Trajectory> routes;
  std::uint64_t rng_seed = 0;
  GridSpec grid;

  double max_height() const {
    double h = 0.0;
    for (const auto& b : buildings) h = std::max(h, b.height());
    return h;
  }

  const Trajectory& route(int id) const {
    for (const auto& r : routes)
      if (r.id == id) return r;
    throw NotFoundError("route " + std::to_string(id) + " not in scenario");
  }
};

namespace detail {

// Street layout of a template: corridor centres and widths per axis.
struct Corridor {
  double center;
  double width;
};

inline std::vector<std::pair<double, double>> free_intervals(double extent,
                                                             const std::vector<Corridor>& corridors) {
  std::vector<std::pair<double, double>> out;
  double cursor = 0.0;
  for (const auto& c : corridors) {
    const double lo = c.center - c.width / 2.0;
    const double hi = c.center + c.width / 2.0;
    if (lo < cursor - 1e-12 || hi > extent + 1e-12)
      throw ConfigError("street corridors overlap or leave the scenario extent");
    if (lo > cursor) out.emplace_back(cursor, lo);
    cursor = hi;
  }
  if (cursor < extent) out.emplace_back(cursor, extent);
  return out;
}

inline std::vector<Trajectory> crossroad_routes(const ScenarioSpec& s) {
  const double w = s.width, d = s.depth, h = s.altitude;
  const double m = 10.0;
  std::vector<std::vector<Vec3>> paths = {
      {{0.2 * w, m, h}, {0.2 * w, d - m, h}},
      {{0.5 * w, d - m, h}, {0.5 * w, m, h}},
      {{0.8 * w, m, h}, {0.8 * w, d - m, h}},
      {{m, 0.2 * d, h}, {w - m, 0.2 * d, h}},
      {{w - m, 0.5 * d, h}, {m, 0.5 * d, h}},
      {{m, 0.8 * d, h}, {w - m, 0.8 * d, h}},
      {{m, m, h}, {w - m, d - m, h}},
  };
  const int counts[] = {40, 40, 40, 32, 32, 32, 32};
  std::vector<Trajectory> out;
  for (std::size_t i = 0; i < paths.size(); ++i)
    out.push_back({static_cast<int>(i) + 1, paths[i],
                   s.snapshots_per_route > 0 ? s.snapshots_per_route : counts[i]});
  return out;
}

inline std::vector<Trajectory> wide_lane_routes(const ScenarioSpec& s) {
  const double w = s.width, d = s.depth, h = s.altitude;
  const double m = 10.0;
  std::vector<std::vector<Vec3>> paths = {
      {{0.5 * w - 8.0, m, h}, {0.5 * w - 8.0, d - m, h}},
      {{0.5 * w + 8.0, d - m, h}, {0.5 * w + 8.0, m, h}},
      {{0.2 * w, m, h}, {0.2 * w, d - m, h}},
      {{0.8 * w, d - m, h}, {0.8 * w, m, h}},
      {{m, 0.2 * d, h}, {w - m, 0.2 * d, h}},
      {{w - m, 0.4 * d, h}, {m, 0.4 * d, h}},
      {{m, 0.6 * d, h}, {w - m, 0.6 * d, h}},
      {{w - m, 0.8 * d, h}, {m, 0.8 * d, h}},
      {{m, d - m, h}, {w - m, m, h}},
  };
  std::vector<Trajectory> out;
  for (std::size_t i = 0; i < paths.size(); ++i)
    out.push_back({static_cast<int>(i) + 1, paths[i],
                   s.snapshots_per_route > 0 ? s.snapshots_per_route : 24});
  return out;
}

}  // namespace detail

// Deterministic for a given spec (including seed).
inline Scenario build_scenario(const ScenarioSpec& spec) {
  if (!(spec.width > 0.0) || !(spec.depth > 0.0) || !std::isfinite(spec.width) ||
      !std::isfinite(spec.depth))
    throw ConfigError("scenario extent must be positive and finite");
  if (spec.building_count < 0) throw ConfigError("building_count must be >= 0");
  if (!(spec.street_width > 0.0)) throw ConfigError("street_width must be positive");
  if (spec.grid.g < 2) throw ConfigError("grid.g must be >= 2");
  if (!(spec.grid.side > 0.0)) throw ConfigError("grid.side must be positive");

  Scenario sc;
  sc.name = spec.kind;
  sc.width = spec.width;
  sc.depth = spec.depth;
  sc.rng_seed = spec.seed;
  sc.grid = spec.grid;

  std::vector<detail::Corridor> along_x;  // corridors at fixed x (running along y)
  std::vector<detail::Corridor> along_y;  // corridors at fixed y (running along x)
  double min_height = 12.0, max_height = 48.0;
  if (spec.kind == ScenarioKind::Crossroad) {
    for (double f : {0.2, 0.5, 0.8}) {
      along_x.push_back({f * spec.width, spec.street_width});
      along_y.push_back({f * spec.depth, spec.street_width});
    }
  } else {
    along_x = {{0.2 * spec.width, spec.street_width},
               {0.5 * spec.width, 3.6 * spec.street_width},
               {0.8 * spec.width, spec.street_width}};
    for (double f : {0.2, 0.4, 0.6, 0.8}) along_y.push_back({f * spec.depth, spec.street_width});
    min_height = 20.0;
    max_height = 90.0;
  }

  const auto xs = detail::free_intervals(spec.width, along_x);
  const auto ys = detail::free_intervals(spec.depth, along_y);
  for (const auto& c : along_x)
    sc.streets.push_back({c.center - c.width / 2.0, 0.0, c.center + c.width / 2.0, spec.depth});
  for (const auto& c : along_y)
    sc.streets.push_back({0.0, c.center - c.width / 2.0, spec.width, c.center + c.width / 2.0});

  std::vector<Rect> blocks;
  for (const auto& [x0, x1] : xs)
    for (const auto& [y0, y1] : ys) blocks.push_back({x0, y0, x1, y1});

  std::mt19937_64 rng(spec.seed);
  std::vector<int> per_block(blocks.size(), 0);
  if (!blocks.empty()) {
    const int base = spec.building_count / static_cast<int>(blocks.size());
    const int extra = spec.building_count % static_cast<int>(blocks.size());
    std::vector<std::size_t> order(blocks.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    // Larger blocks take the extra buildings first; seeded shuffle breaks ties.
    std::shuffle(order.begin(), order.end(), rng);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const auto area = [&](const Rect& r) { return (r.x1 - r.x0) * (r.y1 - r.y0); };
      return area(blocks[a]) > area(blocks[b]);
    });
    for (auto& n : per_block) n = base;
    for (int i = 0; i < extra; ++i) ++per_block[order[static_cast<std::size_t>(i)]];
  } else if (spec.building_count > 0) {
    throw ConfigError("street corridors leave no room for buildings");
  }

  std::uniform_real_distribution<double> setback(1.0, 3.0);
  std::uniform_real_distribution<double> height(min_height, max_height);
  constexpr double kGap = 3.0;
  int next_id = 0;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const int n = per_block[b];
    if (n == 0) continue;
    const Rect& blk = blocks[b];
    const bool split_x = (blk.x1 - blk.x0) >= (blk.y1 - blk.y0);
    const double span = split_x ? blk.x1 - blk.x0 : blk.y1 - blk.y0;
    const double strip = (span - kGap * (n - 1)) / n;
    if (strip < 8.0) throw ConfigError("too many buildings for the template's blocks");
    for (int i = 0; i < n; ++i) {
      Rect r = blk;
      if (split_x) {
        r.x0 = blk.x0 + i * (strip + kGap);
        r.x1 = r.x0 + strip;
      } else {
        r.y0 = blk.y0 + i * (strip + kGap);
        r.y1 = r.y0 + strip;
      }
      const double sx0 = setback(rng), sx1 = setback(rng), sy0 = setback(rng), sy1 = setback(rng);
      Building bld;
      bld.min_corner = {r.x0 + sx0, r.y0 + sy0, 0.0};
      bld.max_corner = {r.x1 - sx1, r.y1 - sy1, height(rng)};
      bld.height_color_id = next_id++;
      sc.buildings.push_back(bld);
    }
  }

  if (spec.routes.empty()) {
    sc.routes = spec.kind == ScenarioKind::Crossroad ? detail::crossroad_routes(spec)
                                                     : detail::wide_lane_routes(spec);
  } else {
    int id = 1;
    for (const auto& r : spec.routes) {
      if (r.waypoints.empty()) throw ConfigError("route without waypoints");
      if (r.snapshots < 1) throw ConfigError("route snapshot count must be >= 1");
      for (const auto& w : r.waypoints)
        if (!w.finite() || w.z != r.waypoints.front().z)
          throw ConfigError("route waypoints must be finite and share one altitude");
      sc.routes.push_back({id++, r.waypoints, r.snapshots});
    }
  }
  if (sc.routes.empty()) throw ConfigError("scenario needs at least one route");
  return sc;
}

// Snapshots spaced uniformly by arc length along the waypoint polyline.
inline std::vector<Snapshot> trajectory_snapshots(const Scenario& scenario, int route_id) {
  const Trajectory& route = scenario.route(route_id);
  const auto& wp = route.waypoints;
  std::vector<double> cumulative{0.0};
  for (std::size_t i = 1; i < wp.size(); ++i)
    cumulative.push_back(cumulative.back() + distance(wp[i - 1], wp[i]));
  const double total = cumulative.back();

  std::vector<Snapshot> out;
  out.reserve(static_cast<std::size_t>(route.snapshot_count));
  for (int k = 0; k < route.snapshot_count; ++k) {
    const double s = route.snapshot_count == 1 ? 0.0 : total * k / (route.snapshot_count - 1);
    Vec3 pos = wp.front();
    for (std::size_t i = 1; i < wp.size(); ++i) {
      const double seg = cumulative[i] - cumulative[i - 1];
      if (s <= cumulative[i] || i + 1 == wp.size()) {
        const double t = seg > 0.0 ? std::clamp((s - cumulative[i - 1]) / seg, 0.0, 1.0) : 0.0;
        pos = wp[i - 1] + (wp[i] - wp[i - 1]) * t;
        break;
      }
    }
    for (const auto& b : scenario.buildings) {
      const bool over = pos.x >= b.min_corner.x && pos.x <= b.max_corner.x &&
                        pos.y >= b.min_corner.y && pos.y <= b.max_corner.y;
      if (over && pos.z <= b.height())
        throw ConfigError("UAV altitude below building at route " + std::to_string(route_id));
    }
    Snapshot snap;
    snap.uav_pos = pos;
    snap.route_id = route_id;
    snap.index = k;
    snap.grid = RxGrid{{pos.x, pos.y, 0.0}, scenario.grid.side, scenario.grid.g};
    out.push_back(snap);
  }
  return out;
}

// Row-major g x g lattice on z = 0; flat index r * g + c. Row r runs along +x,
// column c along +y.
inline std::vector<Vec3> rx_positions(const RxGrid& grid) {
  const int g = grid.g;
  const double step = grid.side / (g - 1);
  const double x0 = grid.center.x - grid.side / 2.0;
  const double y0 = grid.center.y - grid.side / 2.0;
  std::vector<Vec3> out;
  out.reserve(static_cast<std::size_t>(g) * g);
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c) out.push_back({x0 + r * step, y0 + c * step, 0.0});
  return out;
}

}  // namespace snl
