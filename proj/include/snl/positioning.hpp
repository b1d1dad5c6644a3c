#pragma once
// ToA trilateration by weighted nonlinear least squares, receiver selection
// policies and error statistics.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "snl/channel.hpp"
#include "snl/dataset.hpp"
#include "snl/error.hpp"
#include "snl/model.hpp"
#include "snl/scene.hpp"

namespace snl {

struct Measurement {
  Vec3 rx_pos;
  double toa = 0.0;     // seconds
  double weight = 1.0;  // alpha
  std::uint8_t predicted_los = 0;
  std::uint8_t true_los = 0;
  float los_prob = 0.0f;
};

struct PositionEstimate {
  Vec3 pos;
  double cost = 0.0;
  int iterations = 0;
  bool converged = false;
  int used_rx_count = 0;
};

inline double toa_to_distance(double toa) {
  if (toa < 0.0) throw DomainError("negative time of arrival");
  return kSpeedOfLight * toa;
}

// Residual of one measurement: d_i - |x - x_i|.
inline double range_residual(const Vec3& x, const Measurement& m) {
  return toa_to_distance(m.toa) - distance(x, m.rx_pos);
}

// Sum of alpha_i^2 f_i(x)^2.
inline double cost(const Vec3& x, const std::vector<Measurement>& ms) {
  double c = 0.0;
  for (const auto& m : ms) {
    const double f = m.weight * range_residual(x, m);
    c += f * f;
  }
  return c;
}

inline bool all_collinear(const std::vector<Vec3>& pts) {
  if (pts.size() < 3) return true;
  const Vec3 p0 = pts[0];
  for (std::size_t i = 1; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      const Vec3 u = pts[i] - p0, v = pts[j] - p0;
      const Vec3 cr{u.y * v.z - u.z * v.y, u.z * v.x - u.x * v.z, u.x * v.y - u.y * v.x};
      if (cr.norm() > 1e-9 * std::max(1.0, u.norm() * v.norm())) return false;
    }
  return true;
}

struct SolverConfig {
  int max_iterations = 100;
  double step_tol = 1e-9;  // meters
  double lambda0 = 1e-3;
};

namespace detail {

inline PositionEstimate levenberg_marquardt(const std::vector<Measurement>& ms, Vec3 x, const SolverConfig& cfg) {
  PositionEstimate est;
  double lambda = cfg.lambda0;
  double c = cost(x, ms);
  for (int it = 1; it <= cfg.max_iterations; ++it) {
    est.iterations = it;
    Eigen::Matrix3d a = Eigen::Matrix3d::Zero();
    Eigen::Vector3d grad = Eigen::Vector3d::Zero();
    for (const auto& m : ms) {
      if (m.weight == 0.0) continue;
      const Vec3 diff = x - m.rx_pos;
      const double r = diff.norm();
      Eigen::Vector3d j = Eigen::Vector3d::Zero();
      if (r > 0.0) j = -m.weight / r * Eigen::Vector3d(diff.x, diff.y, diff.z);
      const double f = m.weight * (toa_to_distance(m.toa) - r);
      a += j * j.transpose();
      grad += j * f;
    }
    Eigen::Matrix3d damped = a;
    for (int k = 0; k < 3; ++k) damped(k, k) += lambda * std::max(a(k, k), 1e-12);
    const Eigen::Vector3d step = damped.ldlt().solve(-grad);
    if (!step.allFinite()) {
      lambda *= 10.0;
      continue;
    }
    if (step.norm() < cfg.step_tol) {
      est.converged = true;
      break;
    }
    const Vec3 trial{x.x + step(0), x.y + step(1), x.z + step(2)};
    const double ct = cost(trial, ms);
    if (ct < c) {
      x = trial;
      c = ct;
      lambda = std::max(lambda / 10.0, 1e-15);
    } else {
      lambda = std::min(lambda * 10.0, 1e15);
    }
  }
  est.pos = x;
  est.cost = c;
  return est;
}

}  // namespace detail

// Levenberg-Marquardt on alpha_i f_i(x). With no initial guess, starts at the
// receiver centroid lifted by mean(d_i)/sqrt(2). A solution below the ground
// plane triggers a restart from its mirror image; the lower-cost solution with
// z >= 0 is kept.
inline PositionEstimate solve_position(const std::vector<Measurement>& ms, std::optional<Vec3> init = std::nullopt,
                                       const SolverConfig& cfg = {}) {
  std::vector<const Measurement*> active;
  for (const auto& m : ms) {
    if (!std::isfinite(m.toa)) throw DomainError("measurement with non-finite time of arrival");
    if (m.weight < 0.0) throw DomainError("negative measurement weight");
    if (m.weight > 0.0) active.push_back(&m);
  }
  if (active.size() < 3)
    throw InsufficientDataError("trilateration needs at least 3 weighted measurements, got " +
                                std::to_string(active.size()));
  std::vector<Vec3> pts;
  for (const auto* m : active) pts.push_back(m->rx_pos);
  if (all_collinear(pts)) throw InsufficientDataError("receivers are collinear");

  Vec3 start;
  if (init) {
    start = *init;
  } else {
    double mean_d = 0.0;
    for (const auto* m : active) {
      start = start + m->rx_pos;
      mean_d += toa_to_distance(m->toa);
    }
    const double n = static_cast<double>(active.size());
    start = Vec3{start.x / n, start.y / n, start.z / n + mean_d / n / std::sqrt(2.0)};
  }

  PositionEstimate best = detail::levenberg_marquardt(ms, start, cfg);
  if (best.pos.z < 0.0) {
    const Vec3 mirror{best.pos.x, best.pos.y, -best.pos.z};
    PositionEstimate again = detail::levenberg_marquardt(ms, mirror, cfg);
    again.iterations += best.iterations;
    if (again.pos.z >= 0.0) {
      best = again;
    } else {
      const double c_mirror = cost(mirror, ms);
      best.pos = mirror;
      best.cost = c_mirror;
      best.iterations = again.iterations;
    }
  }
  best.used_rx_count = static_cast<int>(active.size());
  return best;
}

// All receivers of one sample with their ToA, truth label and (optionally)
// predicted label and probability.
inline std::vector<Measurement> snapshot_measurements(const Sample& s, const DatasetMeta& meta,
                                                      const Prediction* prediction = nullptr) {
  const auto rx = rx_positions(sample_grid(s, meta));
  if (rx.size() != s.toa.values.size()) throw ShapeError("receiver grid does not match sample");
  if (prediction && prediction->hard.size() != rx.size()) throw ShapeError("prediction does not match receiver grid");
  std::vector<Measurement> ms(rx.size());
  for (std::size_t i = 0; i < rx.size(); ++i) {
    ms[i].rx_pos = rx[i];
    ms[i].toa = s.toa.values[i];
    ms[i].true_los = s.labels.values[i];
    if (prediction) {
      ms[i].predicted_los = prediction->hard[i];
      ms[i].los_prob = prediction->prob[i];
    }
  }
  return ms;
}

struct Selection {
  std::vector<Measurement> measurements;
  bool fallback = false;
};

inline std::vector<std::size_t> finite_toa_indices(const std::vector<Measurement>& ms) {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < ms.size(); ++i)
    if (std::isfinite(ms[i].toa)) ids.push_back(i);
  return ids;
}

// k receivers drawn uniformly without replacement among those with finite ToA.
inline Selection select_random(const std::vector<Measurement>& ms, int k, std::uint64_t seed) {
  auto ids = finite_toa_indices(ms);
  if (k < 0 || ids.size() < static_cast<std::size_t>(k))
    throw InsufficientDataError("cannot select " + std::to_string(k) + " of " + std::to_string(ids.size()) +
                                " receivers with finite ToA");
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(static_cast<std::size_t>(k));
  std::sort(ids.begin(), ids.end());
  Selection sel;
  for (auto i : ids) {
    sel.measurements.push_back(ms[i]);
    sel.measurements.back().weight = 1.0;
  }
  return sel;
}

// Every receiver flagged by `flag` with finite ToA.
template <class Flag>
Selection select_flagged(const std::vector<Measurement>& ms, Flag flag) {
  Selection sel;
  for (const auto& m : ms)
    if (flag(m) && std::isfinite(m.toa)) {
      sel.measurements.push_back(m);
      sel.measurements.back().weight = 1.0;
    }
  return sel;
}

// Predicted-LoS receivers. When fewer than 3 are predicted (or they are
// collinear), the most probable finite-ToA receivers that are not all
// collinear are used instead, three of them, and `fallback` is set.
inline Selection select_predicted_los(const std::vector<Measurement>& ms) {
  Selection sel = select_flagged(ms, [](const Measurement& m) { return m.predicted_los == 1; });
  std::vector<Vec3> pts;
  for (const auto& m : sel.measurements) pts.push_back(m.rx_pos);
  if (!all_collinear(pts)) return sel;
  auto ids = finite_toa_indices(ms);
  std::stable_sort(ids.begin(), ids.end(), [&](auto a, auto b) { return ms[a].los_prob > ms[b].los_prob; });
  std::vector<std::size_t> pick;
  for (auto i : ids) {
    if (pick.size() < 2) {
      pick.push_back(i);
      continue;
    }
    if (!all_collinear({ms[pick[0]].rx_pos, ms[pick[1]].rx_pos, ms[i].rx_pos})) {
      pick.push_back(i);
      break;
    }
  }
  if (pick.size() < 3) throw InsufficientDataError("no 3 non-collinear receivers with finite ToA");
  std::sort(pick.begin(), pick.end());
  sel.measurements.clear();
  for (auto i : pick) {
    sel.measurements.push_back(ms[i]);
    sel.measurements.back().weight = 1.0;
  }
  sel.fallback = true;
  return sel;
}

inline Selection select_true_los(const std::vector<Measurement>& ms) {
  return select_flagged(ms, [](const Measurement& m) { return m.true_los == 1; });
}

inline double positioning_error(const PositionEstimate& est, const Vec3& truth) { return distance(est.pos, truth); }

// (error, i/n) for the i-th smallest error, i = 1..n.
inline std::vector<std::pair<double, double>> error_cdf(std::vector<double> errors) {
  if (errors.empty()) throw DomainError("error_cdf of an empty list");
  std::sort(errors.begin(), errors.end());
  std::vector<std::pair<double, double>> out;
  out.reserve(errors.size());
  const double n = static_cast<double>(errors.size());
  for (std::size_t i = 0; i < errors.size(); ++i) out.emplace_back(errors[i], static_cast<double>(i + 1) / n);
  return out;
}

}  // namespace snl
