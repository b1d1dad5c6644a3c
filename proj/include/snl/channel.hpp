#pragma once
// Ray-geometric ground truth: LoS labels, image-method specular multipath,
// first-arrival ToA and the per-receiver narrowband CIR.

#include <algorithm>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <tuple>
#include <vector>

#include "snl/error.hpp"
#include "snl/scene.hpp"

namespace snl {

inline constexpr double kSpeedOfLight = 299792458.0;

// Segments that only touch a box surface within this distance are not
// occluded by it.
inline constexpr double kGrazingTol = 1e-9;

struct ChannelConfig {
  double freq_hz = 28e9;
  int max_order = 2;
  double reflection_loss = 0.3;
};

struct PropPath {
  std::vector<Vec3> vertices;  // tx, reflection points..., rx
  int order = 0;
  double length = 0.0;
  double delay = 0.0;
  std::complex<double> gain{0.0, 0.0};  // filled by path_gain
};

struct LabelGrid {
  int g = 0;
  std::vector<std::uint8_t> values;
};

// Plane 0 is the real part, plane 1 the imaginary part of the summed complex
// coefficient of each receiver.
struct CirMatrix {
  int g = 0;
  std::vector<float> re;
  std::vector<float> im;
};

struct ToaGrid {
  int g = 0;
  std::vector<double> values;  // seconds, +inf when no path reaches the receiver
};

namespace detail {

inline bool segment_hits_box(const Vec3& p, const Vec3& q, const Building& b, double tol) {
  double t0 = 0.0, t1 = 1.0;
  for (int a = 0; a < 3; ++a) {
    const double lo = b.min_corner[a] + tol;
    const double hi = b.max_corner[a] - tol;
    if (!(lo < hi)) return false;
    const double d = q[a] - p[a];
    if (d == 0.0) {
      if (p[a] <= lo || p[a] >= hi) return false;
      continue;
    }
    double ta = (lo - p[a]) / d;
    double tb = (hi - p[a]) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (!(t0 < t1)) return false;
  }
  return true;
}

// Reflecting face of a building: plane `axis = plane` with outward normal sign
// `side`; lo/hi bound the two remaining axes (axis+1, axis+2 mod 3).
struct Face {
  int axis = 0;
  double plane = 0.0;
  int side = 1;
  double lo[2]{};
  double hi[2]{};

  double signed_offset(const Vec3& p) const { return side * (p[axis] - plane); }
  bool in_front(const Vec3& p) const { return signed_offset(p) > kGrazingTol; }
  bool contains(const Vec3& p) const {
    constexpr double tol = 1e-9;
    for (int k = 0; k < 2; ++k) {
      const double v = p[(axis + 1 + k) % 3];
      if (v < lo[k] - tol || v > hi[k] + tol) return false;
    }
    return true;
  }
  Vec3 mirror(Vec3 p) const {
    p[axis] = 2.0 * plane - p[axis];
    return p;
  }
  // Point where segment a->b crosses the face plane. Caller guarantees a and b
  // lie on opposite sides.
  Vec3 crossing(const Vec3& a, const Vec3& b) const {
    const double t = (plane - a[axis]) / (b[axis] - a[axis]);
    Vec3 p = a + (b - a) * t;
    p[axis] = plane;
    return p;
  }
  bool coplanar(const Face& o) const { return axis == o.axis && plane == o.plane; }
};

inline std::vector<Face> building_faces(const std::vector<Building>& buildings) {
  std::vector<Face> faces;
  faces.reserve(buildings.size() * 5);
  for (const auto& b : buildings) {
    for (int axis = 0; axis < 3; ++axis) {
      for (int side : {-1, 1}) {
        if (axis == 2 && side == -1) continue;  // the floor never reflects
        Face f;
        f.axis = axis;
        f.side = side;
        f.plane = side < 0 ? b.min_corner[axis] : b.max_corner[axis];
        for (int k = 0; k < 2; ++k) {
          const int other = (axis + 1 + k) % 3;
          f.lo[k] = b.min_corner[other];
          f.hi[k] = b.max_corner[other];
        }
        faces.push_back(f);
      }
    }
  }
  return faces;
}

inline double polyline_length(const std::vector<Vec3>& v) {
  double len = 0.0;
  for (std::size_t i = 1; i < v.size(); ++i) len += distance(v[i - 1], v[i]);
  return len;
}

}  // namespace detail

// True iff the open segment (p, q) passes through the interior of any
// building. Symmetric in (p, q) by construction.
inline bool segment_occluded(const Vec3& p, const Vec3& q, const Scenario& scenario) {
  const bool swap = std::tie(q.x, q.y, q.z) < std::tie(p.x, p.y, p.z);
  const Vec3& a = swap ? q : p;
  const Vec3& b = swap ? p : q;
  for (const auto& bld : scenario.buildings)
    if (detail::segment_hits_box(a, b, bld, kGrazingTol)) return true;
  return false;
}

inline bool inside_building(const Vec3& p, const Scenario& scenario) {
  for (const auto& b : scenario.buildings)
    if (b.footprint_contains(p.x, p.y, kGrazingTol) && p.z < b.height() - kGrazingTol) return true;
  return false;
}

// Enumerates specular paths from one transmitter. The transmitter-side image
// points are computed once so that many receivers can be traced cheaply.
class PathTracer {
 public:
  PathTracer(const Scenario& scenario, const Vec3& tx, int max_order)
      : scenario_(&scenario), tx_(tx), max_order_(max_order), faces_(detail::building_faces(scenario.buildings)) {
    if (max_order < 0 || max_order > 2) throw DomainError("max_order must be 0, 1 or 2");
    if (max_order >= 1)
      for (std::size_t f = 0; f < faces_.size(); ++f)
        if (faces_[f].in_front(tx_)) first_.push_back({f, faces_[f].mirror(tx_)});
    if (max_order >= 2)
      for (const auto& [f1, img1] : first_)
        for (std::size_t f2 = 0; f2 < faces_.size(); ++f2) {
          if (f2 == f1 || faces_[f2].coplanar(faces_[f1])) continue;
          if (!faces_[f2].in_front(img1)) continue;
          second_.push_back({f1, f2, img1, faces_[f2].mirror(img1)});
        }
  }

  std::vector<PropPath> paths_to(const Vec3& rx) const {
    std::vector<PropPath> out;
    const Scenario& sc = *scenario_;
    if (!segment_occluded(tx_, rx, sc)) out.push_back(make_path({tx_, rx}, 0));

    for (const auto& [f, img] : first_) {
      const auto& face = faces_[f];
      if (!face.in_front(rx)) continue;
      const Vec3 p = face.crossing(img, rx);
      if (!face.contains(p)) continue;
      if (segment_occluded(tx_, p, sc) || segment_occluded(p, rx, sc)) continue;
      out.push_back(make_path({tx_, p, rx}, 1));
    }

    for (const auto& s : second_) {
      const auto& face1 = faces_[s.f1];
      const auto& face2 = faces_[s.f2];
      if (!face2.in_front(rx)) continue;
      const Vec3 p2 = face2.crossing(s.image2, rx);
      if (!face2.contains(p2) || !face1.in_front(p2)) continue;
      const Vec3 p1 = face1.crossing(s.image1, p2);
      if (!face1.contains(p1)) continue;
      if (segment_occluded(tx_, p1, sc) || segment_occluded(p1, p2, sc) ||
          segment_occluded(p2, rx, sc))
        continue;
      out.push_back(make_path({tx_, p1, p2, rx}, 2));
    }

    std::sort(out.begin(), out.end(), [](const PropPath& a, const PropPath& b) {
      return std::tie(a.delay, a.order) < std::tie(b.delay, b.order);
    });
    return out;
  }

  int max_order() const { return max_order_; }

 private:
  struct FirstImage {
    std::size_t face;
    Vec3 image;
  };
  struct SecondImage {
    std::size_t f1, f2;
    Vec3 image1, image2;
  };

  static PropPath make_path(std::vector<Vec3> vertices, int order) {
    PropPath p;
    p.length = detail::polyline_length(vertices);
    p.delay = p.length / kSpeedOfLight;
    p.order = order;
    p.vertices = std::move(vertices);
    return p;
  }

  const Scenario* scenario_;
  Vec3 tx_;
  int max_order_;
  std::vector<detail::Face> faces_;
  std::vector<FirstImage> first_;
  std::vector<SecondImage> second_;
};

// Paths sorted by delay ascending; gains are left zero.
inline std::vector<PropPath> enumerate_paths(const Vec3& tx, const Vec3& rx, const Scenario& scenario,
                                             int max_order) {
  return PathTracer(scenario, tx, max_order).paths_to(rx);
}

// Free-space amplitude with a per-bounce loss and carrier phase rotation.
inline std::complex<double> path_gain(const PropPath& path, double freq_hz, double reflection_loss) {
  if (!(path.length > 0.0)) throw DomainError("path length must be positive");
  if (!(freq_hz > 0.0)) throw DomainError("frequency must be positive");
  const double lambda = kSpeedOfLight / freq_hz;
  const double amp = lambda / (4.0 * std::numbers::pi * path.length) * std::pow(reflection_loss, path.order);
  const double phase = -2.0 * std::numbers::pi * freq_hz * path.delay;
  return std::polar(amp, phase);
}

struct ChannelGrids {
  LabelGrid labels;
  CirMatrix cir;
  ToaGrid toa;
};

// Labels, CIR and ToA for every receiver of a snapshot in one pass.
inline ChannelGrids simulate_channel(const Snapshot& snapshot, const Scenario& scenario,
                                     const ChannelConfig& cfg = {}) {
  const int g = snapshot.grid.g;
  const auto rxs = rx_positions(snapshot.grid);
  const std::size_t n = rxs.size();
  ChannelGrids out;
  out.labels = {g, std::vector<std::uint8_t>(n, 0)};
  out.cir = {g, std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f)};
  out.toa = {g, std::vector<double>(n, std::numeric_limits<double>::infinity())};

  const PathTracer tracer(scenario, snapshot.uav_pos, cfg.max_order);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& rx = rxs[i];
    if (inside_building(rx, scenario)) continue;
    out.labels.values[i] = segment_occluded(snapshot.uav_pos, rx, scenario) ? 0 : 1;
    const auto paths = tracer.paths_to(rx);
    std::complex<double> sum{0.0, 0.0};
    for (const auto& p : paths) sum += path_gain(p, cfg.freq_hz, cfg.reflection_loss);
    out.cir.re[i] = static_cast<float>(sum.real());
    out.cir.im[i] = static_cast<float>(sum.imag());
    if (!paths.empty()) out.toa.values[i] = paths.front().delay;
  }
  return out;
}

// 1 where the direct segment Tx -> Rx is unobstructed.
inline LabelGrid los_labels(const Snapshot& snapshot, const Scenario& scenario) {
  const auto rxs = rx_positions(snapshot.grid);
  LabelGrid out{snapshot.grid.g, std::vector<std::uint8_t>(rxs.size(), 0)};
  for (std::size_t i = 0; i < rxs.size(); ++i)
    out.values[i] = !inside_building(rxs[i], scenario) && !segment_occluded(snapshot.uav_pos, rxs[i], scenario);
  return out;
}

inline CirMatrix cir_matrix(const Snapshot& snapshot, const Scenario& scenario, double freq_hz, int max_order,
                            double reflection_loss = 0.3) {
  return simulate_channel(snapshot, scenario, {freq_hz, max_order, reflection_loss}).cir;
}

inline ToaGrid first_arrival_toa(const Snapshot& snapshot, const Scenario& scenario, int max_order) {
  ChannelConfig cfg;
  cfg.max_order = max_order;
  return simulate_channel(snapshot, scenario, cfg).toa;
}

}  // namespace snl
