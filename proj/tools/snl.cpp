// Experiment driver: gen | train | eval | fewshot | noise | position.
//
// Exit codes: 0 success, 2 configuration error, 3 data error,
// 4 solver non-convergence under --strict.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "snl/config.hpp"
#include "snl/experiments.hpp"

namespace fs = std::filesystem;
using namespace snl;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNonConvergence = 4;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out;
  std::string dataset;
  std::string checkpoint;
  bool strict = false;
};

struct Run {
  json root;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string hash;
};

Run load_run(const Options& o, bool seed_is_scenario_seed) {
  Run r;
  r.root = o.config.empty() ? json::object() : load_json_file(o.config);
  check_keys(r.root, "config",
             {"description", "seed", "threads", "scenario", "camera", "channel", "dataset", "test_route", "model",
              "train", "checkpoint", "out", "fewshot", "noise", "position"});
  if (o.seed) {
    if (seed_is_scenario_seed)
      r.root["scenario"]["seed"] = *o.seed;
    else
      r.root["seed"] = *o.seed;
  }
  if (o.threads) r.root["threads"] = *o.threads;
  if (!o.dataset.empty()) r.root["dataset"] = o.dataset;
  if (!o.checkpoint.empty()) r.root["checkpoint"] = o.checkpoint;
  if (!o.out.empty()) r.root["out"] = o.out;
  r.seed = get_or<std::uint64_t>(r.root, "seed", 0, "config");
  r.threads = get_or(r.root, "threads", 1, "config");
  if (r.threads < 1) throw ConfigError("threads must be >= 1");
  r.hash = config_hash(r.root);
  return r;
}

std::string out_dir(const Run& r, const char* fallback) {
  const std::string dir = get_or<std::string>(r.root, "out", fallback, "config");
  fs::create_directories(dir);
  return dir;
}

// Scenario, camera and channel sections of `j` (a config root or a few-shot
// source/target block).
Dataset generate_from(const json& j, int threads) {
  const ScenarioSpec spec = scenario_from_json(section(j, "scenario"));
  const CameraSpec cam = camera_from_json(section(j, "camera"), spec.grid);
  return generate(spec, cam, channel_from_json(section(j, "channel")), threads);
}

// The configured dataset file, or a freshly generated one when none is named.
Dataset dataset_from(const json& j, int threads) {
  const std::string path = get_or<std::string>(j, "dataset", "", "config");
  if (!path.empty()) return load_dataset(path);
  return generate_from(j, threads);
}

void print_eval(const EvalResult& e) {
  std::printf("accuracy %.4f over %llu cells\n", e.accuracy, static_cast<unsigned long long>(e.cells));
  std::printf("confusion [true][pred]: TN %llu FP %llu FN %llu TP %llu\n",
              static_cast<unsigned long long>(e.confusion[0][0]), static_cast<unsigned long long>(e.confusion[0][1]),
              static_cast<unsigned long long>(e.confusion[1][0]), static_cast<unsigned long long>(e.confusion[1][1]));
}

int cmd_gen(const Options& o) {
  const Run r = load_run(o, true);
  const Dataset ds = generate_from(r.root, r.threads);
  const std::string path = get_or<std::string>(r.root, "out", "dataset.snld", "config");
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  save(ds, path);
  std::printf("wrote %s: %zu samples, %zu routes, LoS fraction %.4f\n", path.c_str(), ds.samples.size(),
              ds.route_ids().size(), los_fraction(ds));
  return 0;
}

int cmd_train(const Options& o) {
  const Run r = load_run(o, false);
  const Dataset raw = dataset_from(r.root, r.threads);
  const int test_route = get_or(r.root, "test_route", 2, "config");
  TrainConfig tc = train_from_json(section(r.root, "train"));
  tc.threads = r.threads;
  if (!section(r.root, "train").contains("seed")) tc.seed = r.seed;
  const std::string dir = out_dir(r, "out");

  TrainedModel t;
  const std::string resume = get_or<std::string>(r.root, "checkpoint", "", "config");
  if (!resume.empty()) {
    t.model = load_checkpoint(resume);
    t.split = split_by_route(raw, test_route);
    t.history = train(t.model, prepare_for(t.model, raw), t.split, tc);
  } else {
    const ModelSpec ms = model_spec_from_json(section(r.root, "model"));
    t = train_model(raw, test_route, ms.kind, ms.config, tc, r.seed);
  }
  if (!t.split.warning.empty()) std::fprintf(stderr, "warning: %s\n", t.split.warning.c_str());
  save_checkpoint(t.model, dir + "/model.snlm");
  write_history_csv(dir + "/metrics.csv", r.hash, t.history);
  const auto& last = t.history.epochs.back();
  std::printf("%s: %zu train / %zu test samples, %ld steps, final loss %.4f, test accuracy %.4f\n",
              to_string(t.model.kind).c_str(), t.split.train_ids.size(), t.split.test_ids.size(), t.history.steps,
              last.train_loss, last.test_accuracy);
  return 0;
}

Model checkpoint_from(const Run& r) {
  const std::string path = get_or<std::string>(r.root, "checkpoint", "", "config");
  if (path.empty()) throw ConfigError("no checkpoint given (--checkpoint or \"checkpoint\")");
  return load_checkpoint(path);
}

int cmd_eval(const Options& o) {
  const Run r = load_run(o, false);
  const Model m = checkpoint_from(r);
  const Dataset raw = dataset_from(r.root, r.threads);
  const Split split = split_by_route(raw, get_or(r.root, "test_route", 2, "config"));
  const EvalResult e = evaluate_on(m, raw, split.test_ids, r.threads);
  const std::string dir = out_dir(r, "out");
  {
    CsvWriter w(dir + "/per_snapshot.csv", r.hash, {"sample_id", "route", "snapshot", "accuracy"});
    for (std::size_t i = 0; i < split.test_ids.size(); ++i) {
      const auto& s = raw.samples[split.test_ids[i]];
      w.row(split.test_ids[i], s.route_id, s.snapshot_index, e.per_snapshot[i]);
    }
  }
  {
    CsvWriter w(dir + "/confusion.csv", r.hash, {"true_label", "predicted_label", "count"});
    for (int t = 0; t < 2; ++t)
      for (int p = 0; p < 2; ++p) w.row(t, p, e.confusion[t][p]);
  }
  print_eval(e);
  return 0;
}

int cmd_fewshot(const Options& o) {
  const Run r = load_run(o, false);
  const json& f = section(r.root, "fewshot");
  check_keys(f, "fewshot",
             {"source", "target", "ks", "seeds", "pretrain", "finetune", "full_target", "full_target_train"});
  FewShotConfig cfg;
  const ModelSpec ms = model_spec_from_json(section(r.root, "model"));
  cfg.kind = ms.kind;
  cfg.model = ms.config;
  cfg.ks = get_or(f, "ks", cfg.ks, "fewshot");
  cfg.seeds = get_or(f, "seeds", std::vector<std::uint64_t>{r.seed}, "fewshot");
  cfg.pretrain = train_from_json(section(f, "pretrain"));
  cfg.finetune = train_from_json(section(f, "finetune"), fine_tune_defaults());
  cfg.full_target = get_or(f, "full_target", true, "fewshot");
  cfg.full_target_train = train_from_json(section(f, "full_target_train"), cfg.pretrain);
  const json& src = section(f, "source");
  const json& tgt = section(f, "target");
  check_keys(src, "fewshot.source", {"scenario", "camera", "channel", "dataset", "test_route"});
  check_keys(tgt, "fewshot.target", {"scenario", "camera", "channel", "dataset", "test_route"});
  cfg.source_test_route = get_or(src, "test_route", cfg.source_test_route, "fewshot.source");
  cfg.target_test_route = get_or(tgt, "test_route", cfg.target_test_route, "fewshot.target");

  const Dataset source = dataset_from(src, r.threads);
  const Dataset target = dataset_from(tgt, r.threads);
  const FewShotResult res = run_fewshot(source, target, cfg, r.threads);
  const std::string dir = out_dir(r, "out");
  {
    CsvWriter w(dir + "/fewshot.csv", r.hash, {"k", "seed", "accuracy"});
    for (const auto& row : res.rows) w.row(row.k, row.seed, row.accuracy);
  }
  {
    CsvWriter w(dir + "/fewshot_median.csv", r.hash, {"k", "median_accuracy"});
    for (const auto& [k, acc] : res.median_by_k) w.row(k, acc);
    if (!res.full_target.empty()) w.row("full", median(res.full_target));
  }
  for (const auto& [k, acc] : res.median_by_k) std::printf("k=%d median accuracy %.4f\n", k, acc);
  if (!res.full_target.empty()) std::printf("full target training median accuracy %.4f\n", median(res.full_target));
  return 0;
}

int cmd_noise(const Options& o) {
  const Run r = load_run(o, false);
  const json& n = section(r.root, "noise");
  check_keys(n, "noise", {"variances", "seed", "checkpoints"});
  const json& ck = section(n, "checkpoints");
  if (!ck.is_object() || ck.empty()) throw ConfigError("noise.checkpoints must name at least one model");
  std::vector<std::string> names;
  std::vector<Model> models;
  for (const auto& [name, path] : ck.items()) {
    if (!path.is_string()) throw ConfigError("noise.checkpoints." + name + " must be a path");
    names.push_back(name);
    models.push_back(load_checkpoint(path.get<std::string>()));
  }
  std::vector<const Model*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  const auto variances = get_or(n, "variances", default_noise_grid(), "noise");
  const Dataset raw = dataset_from(r.root, r.threads);
  const Split split = split_by_route(raw, get_or(r.root, "test_route", 2, "config"));
  const auto rows = run_noise(ptrs, raw, split.test_ids, variances, get_or<std::uint64_t>(n, "seed", r.seed, "noise"),
                              r.threads);
  const std::string dir = out_dir(r, "out");
  write_noise_csv(dir + "/noise.csv", r.hash, names, rows);
  for (const auto& row : rows) {
    std::printf("variance %.2f:", row.variance);
    for (std::size_t k = 0; k < names.size(); ++k) std::printf(" %s %.4f", names[k].c_str(), row.accuracy[k]);
    std::printf("\n");
  }
  return 0;
}

int cmd_position(const Options& o) {
  const Run r = load_run(o, false);
  const json& p = section(r.root, "position");
  check_keys(p, "position", {"random_k", "seed", "max_iterations", "step_tol", "lambda0"});
  PositionConfig cfg;
  cfg.random_k = get_or(p, "random_k", cfg.random_k, "position");
  cfg.seed = get_or<std::uint64_t>(p, "seed", r.seed, "position");
  cfg.solver.max_iterations = get_or(p, "max_iterations", cfg.solver.max_iterations, "position");
  cfg.solver.step_tol = get_or(p, "step_tol", cfg.solver.step_tol, "position");
  cfg.solver.lambda0 = get_or(p, "lambda0", cfg.solver.lambda0, "position");
  const Model m = checkpoint_from(r);
  const Dataset raw = dataset_from(r.root, r.threads);
  const Split split = split_by_route(raw, get_or(r.root, "test_route", 2, "config"));
  const PositionResult res = run_position(m, raw, split.test_ids, cfg, r.threads);

  const std::string dir = out_dir(r, "out");
  {
    CsvWriter w(dir + "/positions.csv", r.hash,
                {"snapshot_id", "route", "snapshot", "method", "error_m", "used_rx", "converged", "fallback"});
    for (const auto& row : res.rows)
      w.row(row.sample_id, row.route, row.snapshot, row.method, row.error_m, row.used_rx, row.converged,
            row.fallback);
  }
  {
    CsvWriter w(dir + "/summary.csv", r.hash, {"method", "mean_error_m", "snapshots"});
    for (const auto& method : position_methods())
      w.row(method, res.mean_error(method), res.errors.at(method).size());
  }
  for (const auto& method : position_methods()) {
    CsvWriter w(dir + "/cdf_" + method + ".csv", r.hash, {"error_m", "cum_prob"});
    for (const auto& [e, prob] : error_cdf(res.errors.at(method))) w.row(e, prob);
    std::printf("%-14s mean error %.3f m\n", method.c_str(), res.mean_error(method));
  }
  if (res.nonconverged > 0) {
    std::fprintf(stderr, "warning: %d solves did not converge\n", res.nonconverged);
    if (o.strict) return kExitNonConvergence;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sensing-assisted LoS/NLoS identification and UAV positioning experiments"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON experiment configuration");
    sub->add_option("--seed", o.seed, "Override the experiment seed (scenario seed for gen)");
    sub->add_option("--out", o.out, "Output file (gen) or directory");
    sub->add_option("--threads", o.threads, "Worker threads; 1 is bit-reproducible")->check(CLI::PositiveNumber);
    sub->add_flag("--strict", o.strict, "Exit with code 4 when any solve fails to converge");
  };
  auto* gen = app.add_subcommand("gen", "Generate an SNLD dataset");
  auto* train = app.add_subcommand("train", "Train a model on the route-held-out split");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test route");
  auto* fewshot = app.add_subcommand("fewshot", "Cross-scenario few-shot fine-tuning sweep");
  auto* noise = app.add_subcommand("noise", "Accuracy under image noise");
  auto* position = app.add_subcommand("position", "Trilateration with receiver-selection policies");
  for (auto* sub : {gen, train, eval, fewshot, noise, position}) add_common(sub);
  for (auto* sub : {train, eval, noise, position}) sub->add_option("--dataset", o.dataset, "SNLD dataset file");
  for (auto* sub : {train, eval, position})
    sub->add_option("--checkpoint", o.checkpoint, "SNLM checkpoint (resume point for train)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*fewshot) return cmd_fewshot(o);
    if (*noise) return cmd_noise(o);
    if (*position) return cmd_position(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
