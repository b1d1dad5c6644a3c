#include <gtest/gtest.h>

#include <set>

#include "snl/experiments.hpp"
#include "support/oracles.hpp"

using namespace snl;
using namespace snl::testing;

namespace {

std::vector<Measurement> exact(const Vec3& uav, const std::vector<Vec3>& rx) {
  std::vector<Measurement> ms;
  for (const auto& r : rx) {
    Measurement m;
    m.rx_pos = r;
    m.toa = distance(uav, r) / kSpeedOfLight;
    m.true_los = 1;
    ms.push_back(m);
  }
  return ms;
}

const std::vector<Vec3> kSquare{{0, 0, 0}, {100, 0, 0}, {0, 100, 0}, {100, 100, 0}};
const Vec3 kUav{50, 50, 63.3};

std::vector<Measurement> grid_measurements(int n, Rng& rng) {
  std::vector<Measurement> ms;
  for (int i = 0; i < n; ++i) {
    Measurement m;
    m.rx_pos = {static_cast<double>(i % 30) * 5, static_cast<double>(i / 30) * 5, 0};
    m.toa = uniform(rng, 0, 1) < 0.1 ? std::numeric_limits<double>::infinity() : uniform(rng, 2e-7, 6e-7);
    m.true_los = uniform(rng, 0, 1) < 0.4;
    m.los_prob = static_cast<float>(uniform(rng, 0, 1));
    m.predicted_los = m.los_prob >= 0.5f;
    ms.push_back(m);
  }
  return ms;
}

}  // namespace

TEST(ToaDistance, SpeedOfLight) {
  EXPECT_EQ(toa_to_distance(0.0), 0.0);
  EXPECT_DOUBLE_EQ(toa_to_distance(1e-6), 299.792458);
  EXPECT_THROW(toa_to_distance(-1e-9), DomainError);
}

TEST(ToaDistance, SimulatedLosMatchesGeometry) {
  const Scenario sc = build_scenario(ScenarioSpec::crossroad());
  const Snapshot snap = trajectory_snapshots(sc, 2)[6];
  const auto grids = simulate_channel(snap, sc);
  const auto rx = rx_positions(snap.grid);
  int los = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    if (grids.labels.values[i] != 1) continue;
    ++los;
    const double d = distance(snap.uav_pos, rx[i]);
    EXPECT_NEAR(toa_to_distance(grids.toa.values[i]), d, 1e-9 * d);
  }
  EXPECT_GT(los, 0);
}

TEST(Cost, ZeroAtTruthAndOnSphere) {
  const auto ms = exact(kUav, kSquare);
  EXPECT_NEAR(cost(kUav, ms), 0.0, 1e-18);
  std::vector<Measurement> one{ms[0]};
  const double d = toa_to_distance(one[0].toa);
  EXPECT_NEAR(cost({d / std::sqrt(2.0), 0, d / std::sqrt(2.0)}, one), 0.0, 1e-18);
}

TEST(Cost, MatchesHandSummedResiduals) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Measurement> ms;
    for (int i = 0; i < 6; ++i) {
      Measurement m;
      m.rx_pos = {uniform(rng, -50, 50), uniform(rng, -50, 50), 0};
      m.toa = uniform(rng, 1e-7, 5e-7);
      m.weight = uniform(rng, 0, 2);
      ms.push_back(m);
    }
    const Vec3 x{uniform(rng, -50, 50), uniform(rng, -50, 50), uniform(rng, 0, 100)};
    double expect = 0.0;
    for (const auto& m : ms) {
      const double dx = x.x - m.rx_pos.x, dy = x.y - m.rx_pos.y, dz = x.z - m.rx_pos.z;
      const double f = kSpeedOfLight * m.toa - std::sqrt(dx * dx + dy * dy + dz * dz);
      expect += m.weight * m.weight * f * f;
    }
    EXPECT_NEAR(cost(x, ms), expect, 1e-9 * std::max(1.0, expect));
  }
}

TEST(Solve, FourReceiverExactRecovery) {
  const auto est = solve_position(exact(kUav, kSquare));
  EXPECT_TRUE(est.converged);
  EXPECT_LT(positioning_error(est, kUav), 1e-6);
  EXPECT_EQ(est.used_rx_count, 4);
  EXPECT_GE(est.cost, 0.0);
  EXPECT_LE(est.iterations, 100);
}

TEST(Solve, NlosBiasPullsEstimateAway) {
  auto ms = exact(kUav, kSquare);
  ms[2].toa += 20.0 / kSpeedOfLight;
  const auto est = solve_position(ms);
  EXPECT_GT(positioning_error(est, kUav), 1.0);
  EXPECT_GT(est.cost, 0.0);
}

TEST(Solve, ExactRecoveryFromManyReceivers) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const Vec3 truth{uniform(rng, -80, 80), uniform(rng, -80, 80), uniform(rng, 30, 150)};
    std::vector<Vec3> rx;
    for (int i = 0; i < uniform_int(rng, 4, 20); ++i) rx.push_back({uniform(rng, -75, 75), uniform(rng, -75, 75), 0});
    const auto est = solve_position(exact(truth, rx));
    EXPECT_LT(positioning_error(est, truth), 1e-6) << "trial " << trial;
  }
}

TEST(Solve, MirrorSolutionIsRejected) {
  const auto ms = exact(kUav, kSquare);
  const auto est = solve_position(ms, Vec3{50, 50, -40});
  EXPECT_GE(est.pos.z, 0.0);
  EXPECT_LT(positioning_error(est, kUav), 1e-6);
}

TEST(Solve, ZeroWeightsAreExcluded) {
  auto ms = exact(kUav, {{0, 0, 0}, {100, 0, 0}, {0, 100, 0}, {100, 100, 0}, {50, -30, 0}});
  ms[1].toa *= 3.0;
  ms[4].toa *= 0.5;
  ms[1].weight = 0.0;
  ms[4].weight = 0.0;
  std::vector<Measurement> kept{ms[0], ms[2], ms[3]};
  const auto a = solve_position(ms);
  const auto b = solve_position(kept);
  EXPECT_EQ(a.used_rx_count, 3);
  EXPECT_NEAR(distance(a.pos, b.pos), 0.0, 1e-9);
  EXPECT_LT(positioning_error(a, kUav), 1e-6);
}

TEST(Solve, UniformWeightScalingKeepsArgmin) {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    auto ms = exact({uniform(rng, 0, 100), uniform(rng, 0, 100), uniform(rng, 40, 90)}, kSquare);
    for (auto& m : ms) m.toa += uniform(rng, 0, 15) / kSpeedOfLight;
    const auto a = solve_position(ms);
    const double k = uniform(rng, 0.1, 10);
    for (auto& m : ms) m.weight *= k;
    const auto b = solve_position(ms);
    EXPECT_NEAR(distance(a.pos, b.pos), 0.0, 1e-6);
  }
}

TEST(Solve, InsufficientOrDegenerateInput) {
  auto ms = exact(kUav, kSquare);
  EXPECT_THROW(solve_position({ms[0], ms[1]}), InsufficientDataError);
  EXPECT_THROW(solve_position(exact(kUav, {{0, 0, 0}, {10, 0, 0}, {20, 0, 0}, {35, 0, 0}})), InsufficientDataError);
  ms[0].toa = std::numeric_limits<double>::infinity();
  EXPECT_THROW(solve_position(ms), DomainError);
  ms = exact(kUav, kSquare);
  ms[0].weight = -1;
  EXPECT_THROW(solve_position(ms), DomainError);
}

TEST(Solve, IterationCapReportsNonConvergence) {
  SolverConfig cfg;
  cfg.max_iterations = 1;
  const auto est = solve_position(exact(kUav, kSquare), Vec3{-300, 200, 5}, cfg);
  EXPECT_FALSE(est.converged);
  EXPECT_EQ(est.iterations, 1);
}

TEST(Select, RandomDrawsDistinctFiniteReceivers) {
  Rng rng(5);
  const auto ms = grid_measurements(900, rng);
  const auto a = select_random(ms, 3, 42);
  ASSERT_EQ(a.measurements.size(), 3u);
  std::set<std::pair<double, double>> seen;
  for (const auto& m : a.measurements) {
    EXPECT_TRUE(std::isfinite(m.toa));
    EXPECT_EQ(m.weight, 1.0);
    seen.insert({m.rx_pos.x, m.rx_pos.y});
  }
  EXPECT_EQ(seen.size(), 3u);
  const auto b = select_random(ms, 3, 42);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.measurements[i].rx_pos, b.measurements[i].rx_pos);
  const std::size_t finite = finite_toa_indices(ms).size();
  EXPECT_EQ(select_random(ms, static_cast<int>(finite), 1).measurements.size(), finite);
  EXPECT_THROW(select_random(ms, static_cast<int>(finite) + 1, 1), InsufficientDataError);
}

TEST(Select, PredictedLosUsesFlaggedFiniteReceivers) {
  Rng rng(6);
  const auto ms = grid_measurements(900, rng);
  const auto sel = select_predicted_los(ms);
  EXPECT_FALSE(sel.fallback);
  std::size_t expected = 0;
  for (const auto& m : ms) expected += (m.predicted_los == 1 && std::isfinite(m.toa)) ? 1 : 0;
  EXPECT_EQ(sel.measurements.size(), expected);
  EXPECT_LE(sel.measurements.size(), 900u);
  for (const auto& m : sel.measurements) EXPECT_EQ(m.predicted_los, 1);
}

TEST(Select, PerfectPredictionEqualsTrueLos) {
  Rng rng(7);
  auto ms = grid_measurements(900, rng);
  for (auto& m : ms) m.predicted_los = m.true_los;
  const auto a = select_predicted_los(ms);
  const auto b = select_true_los(ms);
  ASSERT_EQ(a.measurements.size(), b.measurements.size());
  for (std::size_t i = 0; i < a.measurements.size(); ++i) EXPECT_EQ(a.measurements[i].rx_pos, b.measurements[i].rx_pos);
}

TEST(Select, AllNlosPredictionFallsBackToMostProbable) {
  Rng rng(8);
  auto ms = grid_measurements(900, rng);
  for (auto& m : ms) m.predicted_los = 0;
  const auto sel = select_predicted_los(ms);
  EXPECT_TRUE(sel.fallback);
  ASSERT_EQ(sel.measurements.size(), 3u);
  float lowest_kept = 1.0f;
  for (const auto& m : sel.measurements) lowest_kept = std::min(lowest_kept, m.los_prob);
  int higher = 0;
  for (const auto& m : ms) higher += (std::isfinite(m.toa) && m.los_prob > lowest_kept) ? 1 : 0;
  EXPECT_LE(higher, 2);
}

TEST(ErrorStats, EuclideanError) {
  PositionEstimate e;
  e.pos = {3, 4, 0};
  EXPECT_EQ(positioning_error(e, {0, 0, 0}), 5.0);
  e.pos = {1, 2, 3};
  EXPECT_EQ(positioning_error(e, {1, 2, 3}), 0.0);
}

TEST(ErrorStats, CdfSteps) {
  EXPECT_EQ(error_cdf({2.5}), (std::vector<std::pair<double, double>>{{2.5, 1.0}}));
  const auto c = error_cdf({3, 1, 2, 2});
  ASSERT_EQ(c.size(), 4u);
  EXPECT_EQ(c[1].first, 2.0);
  EXPECT_EQ(c[2].first, 2.0);
  EXPECT_DOUBLE_EQ(c[2].second - c[0].second, 2.0 / 4);
  Rng rng(9);
  std::vector<double> errs(200);
  for (auto& e : errs) e = uniform(rng, 0, 10);
  const auto big = error_cdf(errs);
  for (std::size_t i = 1; i < big.size(); ++i) {
    EXPECT_GE(big[i].first, big[i - 1].first);
    EXPECT_GT(big[i].second, big[i - 1].second);
  }
  EXPECT_EQ(big.back().second, 1.0);
  EXPECT_THROW(error_cdf({}), DomainError);
}

TEST(Policies, TrueLosBeatsRandomOnSimulatedSnapshots) {
  ScenarioSpec s;
  s.routes = {{{{40, 40, 63.3}, {40, 220, 63.3}}, 6}};
  const Dataset ds = generate(s, CameraSpec::for_grid(s.grid, 32), ChannelConfig{});
  std::vector<double> rnd, truth;
  for (std::size_t k = 0; k < ds.samples.size(); ++k) {
    const auto ms = snapshot_measurements(ds.samples[k], ds.meta);
    truth.push_back(positioning_error(solve_position(select_true_los(ms).measurements), ds.samples[k].uav_pos));
    rnd.push_back(positioning_error(solve_position(select_random_solvable(ms, 3, k).measurements),
                                    ds.samples[k].uav_pos));
  }
  EXPECT_LE(mean_of(truth), mean_of(rnd));
  for (double e : truth) EXPECT_LT(e, 1e-4);
}
