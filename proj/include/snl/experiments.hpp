#pragma once
// Evaluation protocols shared by the command-line driver and the acceptance
// suite: route-held-out training, cross-scenario few-shot, image-noise sweep
// and positioning with the three receiver-selection policies.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "snl/csv.hpp"
#include "snl/dataset.hpp"
#include "snl/model.hpp"
#include "snl/positioning.hpp"
#include "snl/scene.hpp"
#include "snl/sensing.hpp"

namespace snl {

inline double median(std::vector<double> v) {
  if (v.empty()) throw DomainError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Scenario built from `spec`, flown at spec.altitude.
inline Dataset generate(const ScenarioSpec& spec, const CameraSpec& cam, const ChannelConfig& channel,
                        int threads = 1) {
  return generate_dataset(build_scenario(spec), spec.altitude, cam, channel, threads);
}

// The dataset as the model expects it: CIR standardized with the model's
// training statistics.
inline Dataset prepare_for(const Model& m, const Dataset& ds) {
  if (ds.meta.normalized) return ds;
  return apply_cir_normalization(ds, m.cir_stats);
}

struct TrainedModel {
  Model model;
  TrainHistory history;
  Split split;
};

// Trains on every route except `test_route`; CIR statistics come from the
// training routes only and are stored in the model.
inline TrainedModel train_model(const Dataset& raw, int test_route, ModelKind kind, const ModelConfig& mcfg,
                                const TrainConfig& tcfg, std::uint64_t init_seed) {
  TrainedModel out;
  out.split = split_by_route(raw, test_route);
  if (out.split.train_ids.empty()) throw DomainError("train: " + out.split.warning);
  const Dataset ds = raw.meta.normalized ? raw : normalize_cir(raw, out.split);
  if (mcfg.grid != ds.meta.g) throw ConfigError("model grid does not match dataset grid");
  out.model = Model::create(kind, mcfg, init_seed);
  out.model.cir_stats = ds.normalization;
  out.history = train(out.model, ds, out.split, tcfg);
  return out;
}

inline EvalResult evaluate_on(const Model& m, const Dataset& raw, const std::vector<std::size_t>& ids,
                              int threads = 1) {
  return evaluate(m, prepare_for(m, raw), ids, threads);
}

struct FewShotConfig {
  std::vector<int> ks{0, 10, 25, 50, 100, 200};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int source_test_route = 9;
  int target_test_route = 2;
  ModelKind kind = ModelKind::Fusion;
  ModelConfig model;
  TrainConfig pretrain;
  TrainConfig finetune = fine_tune_defaults();
  bool full_target = true;  // also train from scratch on the whole target split
  TrainConfig full_target_train;
};

struct FewShotRow {
  int k = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};

struct FewShotResult {
  std::vector<FewShotRow> rows;
  std::map<int, double> median_by_k;
  std::vector<double> full_target;  // per seed, empty when disabled
};

// Pre-trains on the source scenario, fine-tunes on k target samples drawn from
// the target training routes and evaluates on the target test route.
inline FewShotResult run_fewshot(const Dataset& source, const Dataset& target, const FewShotConfig& cfg,
                                 int threads = 1) {
  if (cfg.ks.empty() || cfg.seeds.empty()) throw ConfigError("fewshot: k list and seeds must be non-empty");
  FewShotResult res;
  const Split target_split = split_by_route(target, cfg.target_test_route);
  for (auto seed : cfg.seeds) {
    TrainConfig pre = cfg.pretrain;
    pre.seed = seed;
    pre.eval_each_epoch = false;
    pre.threads = threads;
    const TrainedModel src = train_model(source, cfg.source_test_route, cfg.kind, cfg.model, pre, seed);
    const Dataset tgt = prepare_for(src.model, target);
    for (int k : cfg.ks) {
      const auto subset = few_shot_subset(target_split.train_ids, k, seed * 1000003ull + static_cast<std::uint64_t>(k));
      TrainConfig ft = cfg.finetune;
      ft.seed = seed;
      ft.threads = threads;
      const Model tuned = fine_tune(src.model, tgt, subset, ft);
      res.rows.push_back({k, seed, evaluate(tuned, tgt, target_split.test_ids, threads).accuracy});
    }
    if (cfg.full_target) {
      TrainConfig full = cfg.full_target_train;
      full.seed = seed;
      full.eval_each_epoch = false;
      full.threads = threads;
      const TrainedModel t = train_model(target, cfg.target_test_route, cfg.kind, cfg.model, full, seed);
      res.full_target.push_back(evaluate_on(t.model, target, t.split.test_ids, threads).accuracy);
    }
  }
  for (int k : cfg.ks) {
    std::vector<double> acc;
    for (const auto& r : res.rows)
      if (r.k == k) acc.push_back(r.accuracy);
    res.median_by_k[k] = median(acc);
  }
  return res;
}

inline std::vector<double> default_noise_grid() {
  std::vector<double> v;
  for (int i = 0; i <= 10; ++i) v.push_back(i / 20.0);
  return v;
}

struct NoiseRow {
  double variance = 0.0;
  std::vector<double> accuracy;  // one per model, in the order given
};

// Adds zero-mean Gaussian noise of each variance to the test images only and
// re-evaluates every model. Noise seeds depend on (seed, variance index,
// sample id), so all models see identical noisy images.
inline std::vector<NoiseRow> run_noise(const std::vector<const Model*>& models, const Dataset& raw,
                                       const std::vector<std::size_t>& ids, const std::vector<double>& variances,
                                       std::uint64_t seed, int threads = 1) {
  if (models.empty()) throw ConfigError("noise: no models");
  std::vector<NoiseRow> rows;
  for (std::size_t vi = 0; vi < variances.size(); ++vi) {
    const double var = variances[vi];
    if (var < 0.0) throw ConfigError("noise: negative variance");
    Dataset noisy = raw;
    parallel_for(ids.size(), threads, [&](std::size_t i) {
      auto& img = noisy.samples[ids[i]].image;
      img = add_gaussian_noise(img, var, (seed * 1315423911ull + vi) * 2654435761ull + ids[i]);
    });
    NoiseRow row{var, {}};
    for (const Model* m : models) row.accuracy.push_back(evaluate_on(*m, noisy, ids, threads).accuracy);
    rows.push_back(std::move(row));
  }
  return rows;
}

struct PositionConfig {
  int random_k = 3;
  std::uint64_t seed = 0;
  SolverConfig solver;
};

struct PositionRow {
  std::size_t sample_id = 0;
  int route = 0;
  int snapshot = 0;
  std::string method;
  double error_m = 0.0;
  int used_rx = 0;
  bool converged = false;
  bool fallback = false;
};

struct PositionResult {
  std::vector<PositionRow> rows;
  std::map<std::string, std::vector<double>> errors;  // by method
  int nonconverged = 0;

  double mean_error(const std::string& method) const {
    auto it = errors.find(method);
    return it == errors.end() ? std::nan("") : mean_of(it->second);
  }
};

inline const std::vector<std::string>& position_methods() {
  static const std::vector<std::string> m{"random", "predicted_los", "true_los"};
  return m;
}

// Random draws that happen to be collinear are redrawn with the next seed.
inline Selection select_random_solvable(const std::vector<Measurement>& ms, int k, std::uint64_t seed) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Selection sel = select_random(ms, k, seed + static_cast<std::uint64_t>(attempt) * 0x9e3779b97f4a7c15ull);
    try {
      solve_position(sel.measurements);
      return sel;
    } catch (const InsufficientDataError&) {
    }
  }
  throw InsufficientDataError("no non-collinear random receiver subset found");
}

// Trilaterates every sample in `ids` with the random, predicted-LoS and
// true-LoS policies.
inline PositionResult run_position(const Model& m, const Dataset& raw, const std::vector<std::size_t>& ids,
                                   const PositionConfig& cfg, int threads = 1) {
  if (ids.empty()) throw DomainError("position: no samples");
  const Dataset prepared = prepare_for(m, raw);
  std::vector<std::vector<PositionRow>> per(ids.size());
  parallel_for(ids.size(), threads, [&](std::size_t i) {
    const std::size_t id = ids[i];
    const Sample& s = raw.samples.at(id);
    const Prediction pred = predict(m, prepared.samples.at(id));
    const auto ms = snapshot_measurements(s, raw.meta, &pred);
    auto run = [&](const std::string& method, const Selection& sel) {
      const auto est = solve_position(sel.measurements, std::nullopt, cfg.solver);
      per[i].push_back({id, s.route_id, s.snapshot_index, method, positioning_error(est, s.uav_pos),
                        est.used_rx_count, est.converged, sel.fallback});
    };
    run("random", select_random_solvable(ms, cfg.random_k, cfg.seed * 0x100000001b3ull + id));
    run("predicted_los", select_predicted_los(ms));
    run("true_los", select_true_los(ms));
  });
  PositionResult res;
  for (auto& rows : per)
    for (auto& r : rows) {
      res.errors[r.method].push_back(r.error_m);
      res.nonconverged += r.converged ? 0 : 1;
      res.rows.push_back(std::move(r));
    }
  return res;
}

inline void write_history_csv(const std::string& path, const std::string& hash, const TrainHistory& h) {
  CsvWriter w(path, hash, {"epoch", "train_loss", "test_accuracy"});
  for (const auto& e : h.epochs) w.row(e.epoch, e.train_loss, e.test_accuracy);
}

// Drops are measured against the variance-0 row when the grid contains one.
inline void write_noise_csv(const std::string& path, const std::string& hash, const std::vector<std::string>& names,
                            const std::vector<NoiseRow>& rows) {
  std::vector<std::string> header{"variance"};
  for (const auto& n : names) header.push_back(n + "_accuracy");
  for (const auto& n : names) header.push_back(n + "_drop");
  CsvWriter w(path, hash, header);
  const NoiseRow* clean = nullptr;
  for (const auto& r : rows)
    if (r.variance == 0.0) clean = &r;
  for (const auto& r : rows) {
    std::vector<double> cells{r.variance};
    cells.insert(cells.end(), r.accuracy.begin(), r.accuracy.end());
    for (std::size_t k = 0; k < r.accuracy.size(); ++k)
      cells.push_back(clean ? clean->accuracy[k] - r.accuracy[k] : std::nan(""));
    w.row_values(cells);
  }
}

}  // namespace snl
