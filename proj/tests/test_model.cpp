#include <gtest/gtest.h>

#include <sstream>

#include "snl/experiments.hpp"
#include "support/oracles.hpp"

using namespace snl;
using namespace snl::testing;

namespace {

// 20 samples on two crossroad routes with the desk-scale grid and camera.
const Dataset& toy() {
  static const Dataset ds = [] {
    ScenarioSpec s;
    s.routes = {{{{40, 40, 63.3}, {40, 220, 63.3}}, 10}, {{{20, 130, 63.3}, {180, 130, 63.3}}, 10}};
    const Dataset raw = generate(s, CameraSpec::for_grid(s.grid, 96), ChannelConfig{});
    Split all;
    for (std::size_t i = 0; i < raw.samples.size(); ++i) all.train_ids.push_back(i);
    return normalize_cir(raw, all);
  }();
  return ds;
}

std::vector<std::size_t> all_ids(const Dataset& ds) {
  std::vector<std::size_t> ids(ds.samples.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  return ids;
}

ModelConfig tiny() {
  ModelConfig c;
  c.image_side = 16;
  c.patch = 4;
  c.embed_dim = 8;
  c.heads = 2;
  c.depth = 1;
  c.branch_channels = 4;
  c.grid = 5;
  c.fusion_depth = 1;
  c.classifier_depth = 1;
  c.stem_channels = 3;
  c.rgb_head_depth = 1;
  c.rgb_head_channels = 4;
  c.mlp_hidden_ratio = 2;
  return c;
}

std::string checkpoint_bytes(const Model& m) {
  std::stringstream ss;
  save_checkpoint(m, ss);
  return ss.str();
}

}  // namespace

TEST(ModelShapes, BranchesShareShapeAndOutputIsGrid) {
  Rng rng(1);
  for (int trial = 0; trial < 6; ++trial) {
    ModelConfig cfg = tiny();
    cfg.grid = uniform_int(rng, 2, 7);
    cfg.branch_channels = 2 * uniform_int(rng, 1, 3);
    cfg.classifier_depth = uniform_int(rng, 0, 2);
    cfg.fusion_depth = uniform_int(rng, 0, 2);
    const auto params = init_params<double>(ModelKind::Fusion, cfg, static_cast<std::uint64_t>(trial));
    Tape<double> tape;
    Bound<double> b(tape, params);
    const auto g = static_cast<std::size_t>(cfg.grid), f = static_cast<std::size_t>(cfg.branch_channels);
    const auto img = tape.constant(random_tensor(rng, {3, 24, 24}, 0, 1));
    const auto cir = tape.constant(random_tensor(rng, {2, g, g}));
    const auto fv = vit_branch(b, cfg, img);
    const auto fc = cnn_branch(b, cir);
    EXPECT_EQ(fv.shape(), (Shape{f, g, g}));
    EXPECT_EQ(fc.shape(), (Shape{f, g, g}));
    EXPECT_EQ(concat_channels(fv, fc).dim(0), 2 * f);
    const auto prob = fuse_and_classify(b, cfg, fv, fc);
    EXPECT_EQ(prob.shape(), (Shape{g, g}));
    for (double p : prob.value().vector()) {
      EXPECT_GT(p, 0.0);
      EXPECT_LT(p, 1.0);
    }
  }
}

TEST(ModelShapes, PaperScaleCnnBranchAndFusionWidth) {
  ModelParams<float> p;
  Initializer init(0);
  add_conv(p, init, "cnn.0", 128, 2, 3);
  add_conv(p, init, "cnn.1", 128, 128, 3);
  Tape<float> tape;
  Bound<float> b(tape, p);
  const auto f = cnn_branch(b, tape.constant(Tensor<float>(Shape{2, 30, 30})));
  EXPECT_EQ(f.shape(), (Shape{128, 30, 30}));
  EXPECT_EQ(concat_channels(f, f).dim(0), 256u);
  for (float v : f.value().vector()) EXPECT_EQ(v, 0.0f);
}

TEST(ModelShapes, CnnBranchPreservesAnyGrid) {
  for (int g : {1, 3, 8, 30}) {
    ModelConfig cfg = tiny();
    cfg.grid = g;
    const auto p = init_params<double>(ModelKind::Fusion, cfg, 0);
    Tape<double> tape;
    Bound<double> b(tape, p);
    const auto gs = static_cast<std::size_t>(g);
    EXPECT_EQ(cnn_branch(b, tape.constant(Tensor<double>(Shape{2, gs, gs}, 1.0))).shape(), (Shape{4, gs, gs}));
  }
}

TEST(ModelShapes, PaperConfigGeometry) {
  const ModelConfig c = ModelConfig::paper();
  EXPECT_EQ(c.tokens(), 196u);
  EXPECT_EQ(c.embed_dim, 768);
  EXPECT_EQ(c.branch_channels, 128);
  EXPECT_NO_THROW(c.validate());
  const ModelConfig d = ModelConfig::desk();
  EXPECT_EQ(d.image_side, 96);
  EXPECT_EQ(d.patch, 8);
  EXPECT_EQ(d.embed_dim, 64);
  EXPECT_EQ(d.grid, 30);
}

TEST(ModelShapes, InvalidConfigsAreRejected) {
  ModelConfig c = tiny();
  c.patch = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.depth = 0;
  EXPECT_THROW(init_params<float>(ModelKind::Fusion, c, 0), ConfigError);
}

TEST(Vit, ZeroImageZeroPositionsGiveIdenticalTokens) {
  auto p = init_params<double>(ModelKind::Fusion, tiny(), 4);
  p["vit.pos"].fill(0.0);
  Tape<double> tape;
  Bound<double> b(tape, p);
  const auto z = vit_tokens(b, tiny(), tape.constant(Tensor<double>(Shape{3, 20, 20}))).value();
  const std::size_t n = z.dim(0), d = z.dim(1);
  ASSERT_EQ(n, 16u);
  for (std::size_t r = 1; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(z[r * d + c], z[c]);
}

TEST(Baselines, OutputsAreGridProbabilities) {
  Rng rng(2);
  for (auto kind : {ModelKind::RgbOnly, ModelKind::CirOnly}) {
    const auto p = init_params<double>(kind, tiny(), 1);
    Tape<double> tape;
    Bound<double> b(tape, p);
    const auto prob = forward(kind, tiny(), b, tape.constant(random_tensor(rng, {3, 20, 20}, 0, 1)),
                              tape.constant(random_tensor(rng, {2, 5, 5})));
    EXPECT_EQ(prob.shape(), (Shape{5, 5}));
    for (double v : prob.value().vector()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Baselines, UntrainedModelsDoNotBeatMajority) {
  const Dataset& ds = toy();
  const auto ids = all_ids(ds);
  const double majority = majority_rate(ds, ids);
  for (auto kind : {ModelKind::Fusion, ModelKind::RgbOnly, ModelKind::CirOnly}) {
    std::vector<double> acc;
    for (std::uint64_t seed = 0; seed < 3; ++seed)
      acc.push_back(evaluate(Model::create(kind, ModelConfig::desk(), seed), ds, ids).accuracy);
    EXPECT_LE(median(acc), majority + 0.02) << to_string(kind);
  }
}

TEST(Decide, ThresholdAtHalf) {
  const std::vector<float> p{0.5f, 0.4999f, 0.9f, 0.0f, 1.0f};
  EXPECT_EQ(decide(p), (std::vector<std::uint8_t>{1, 0, 1, 0, 1}));
  EXPECT_EQ(decide(std::vector<float>(9, 0.9f)), std::vector<std::uint8_t>(9, 1));
  Rng rng(3);
  std::vector<float> r(500);
  for (auto& v : r) v = static_cast<float>(uniform(rng, 0, 1));
  const auto h = decide(r);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(h[i] == 1, r[i] >= 0.5f);
}

TEST(Loss, BatchMeanOfSummedCells) {
  Tape<double> tape;
  const std::vector<Var<double>> probs{tape.constant(Tensor<double>(Shape{3, 3}, 0.5)),
                                       tape.constant(Tensor<double>(Shape{3, 3}, 1 - kBceEpsilon))};
  const std::vector<Tensor<double>> labels{Tensor<double>(Shape{3, 3}, 1.0), Tensor<double>(Shape{3, 3}, 1.0)};
  const double loss = bce_loss<double>(probs, labels).value()[0];
  EXPECT_NEAR(loss, 9 * std::log(2.0) / 2, 1e-6);
  EXPECT_GE(loss, 0.0);
  EXPECT_NEAR(bce_loss<double>(std::span(probs).subspan(1), std::span(labels).subspan(1)).value()[0], 0.0, 1e-5);
  EXPECT_THROW(bce_loss<double>(probs, std::span(labels).subspan(1)), ShapeError);
}

TEST(Evaluate, PerfectConstantAndConfusion) {
  const Dataset& ds = toy();
  const auto ids = all_ids(ds);
  const auto perfect = evaluate(
      [](const Sample& s) {
        return Prediction{s.labels.g, std::vector<float>(s.labels.values.size()), s.labels.values};
      },
      ds, ids);
  EXPECT_EQ(perfect.accuracy, 1.0);
  EXPECT_EQ(perfect.confusion[0][1], 0u);
  EXPECT_EQ(perfect.confusion[1][0], 0u);
  EXPECT_EQ(perfect.per_snapshot.size(), ids.size());

  const auto ones = evaluate(
      [](const Sample& s) { return make_prediction(s.labels.g, std::vector<float>(s.labels.values.size(), 0.9f)); },
      ds, ids);
  EXPECT_NEAR(ones.accuracy, los_fraction(ds), 1e-12);
  EXPECT_EQ(ones.confusion[0][0] + ones.confusion[0][1] + ones.confusion[1][0] + ones.confusion[1][1], ones.cells);
  EXPECT_EQ(ones.cells, 20u * 900);
  const Predictor any = [](const Sample& s) { return make_prediction(s.labels.g, {}); };
  EXPECT_THROW(evaluate(any, ds, {}), DomainError);
  EXPECT_THROW(evaluate(any, ds, {0}), ShapeError);
}

TEST(Training, LossFallsAndMovingAverageTrendsDown) {
  Model m = Model::create(ModelKind::Fusion, ModelConfig::desk(), 0);
  TrainConfig tc;
  tc.epochs = 20;
  tc.seed = 0;
  tc.eval_each_epoch = false;
  const auto hist = optimize(m, toy(), all_ids(toy()), {}, tc);
  ASSERT_EQ(hist.epochs.size(), 21u);
  EXPECT_LT(hist.epochs[1].train_loss, hist.epochs[0].train_loss);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t e = 5; e <= 20; ++e) {
    double avg = 0.0;
    for (std::size_t k = e - 4; k <= e; ++k) avg += hist.epochs[k].train_loss / 5.0;
    EXPECT_LE(avg, prev) << "window ending at epoch " << e;
    prev = avg;
  }
}

TEST(Training, SameSeedSameLossBits) {
  auto run = [](int threads) {
    Model m = Model::create(ModelKind::CirOnly, ModelConfig::desk(), 5);
    TrainConfig tc;
    tc.epochs = 2;
    tc.seed = 5;
    tc.threads = threads;
    tc.eval_each_epoch = false;
    const auto h = optimize(m, toy(), all_ids(toy()), {}, tc);
    return std::make_pair(h.epochs.back().train_loss, checkpoint_bytes(m));
  };
  const auto a = run(1);
  const auto b = run(1);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(run(3).second, run(3).second);
}

TEST(Training, MaxStepsAndValidation) {
  Model m = Model::create(ModelKind::CirOnly, ModelConfig::desk(), 0);
  TrainConfig tc;
  tc.max_steps = 3;
  tc.batch_size = 2;
  tc.eval_each_epoch = false;
  EXPECT_EQ(optimize(m, toy(), all_ids(toy()), {}, tc).steps, 3);
  tc.batch_size = 0;
  EXPECT_THROW(optimize(m, toy(), all_ids(toy()), {}, tc), ConfigError);
  EXPECT_THROW(optimize(m, toy(), {}, {}, TrainConfig{}), DomainError);
}

TEST(FineTune, EmptySubsetIsIdentity) {
  const Model m = Model::create(ModelKind::Fusion, ModelConfig::desk(), 7);
  EXPECT_EQ(checkpoint_bytes(fine_tune(m, toy(), {})), checkpoint_bytes(m));
}

TEST(FineTune, FullSubsetEqualsContinuedTraining) {
  const Model m = Model::create(ModelKind::CirOnly, ModelConfig::desk(), 7);
  TrainConfig tc = fine_tune_defaults();
  tc.epochs = 2;
  const auto ids = all_ids(toy());
  const Model tuned = fine_tune(m, toy(), ids, tc);
  Model continued = m;
  optimize(continued, toy(), ids, {}, tc);
  EXPECT_EQ(checkpoint_bytes(tuned), checkpoint_bytes(continued));
  EXPECT_NE(checkpoint_bytes(tuned), checkpoint_bytes(m));
}

TEST(FineTune, DefaultsAreThirtyEpochsAtSmallRate) {
  const TrainConfig c = fine_tune_defaults();
  EXPECT_EQ(c.epochs, 30);
  EXPECT_DOUBLE_EQ(c.adam.lr, 1e-4);
}

TEST(Checkpoint, RoundTripAndPrediction) {
  Model m = Model::create(ModelKind::Fusion, tiny(), 11);
  m.cir_stats = {{0.1f, -0.2f}, {1.5f, 0.7f}};
  const std::string bytes = checkpoint_bytes(m);
  std::stringstream in(bytes);
  const Model back = load_checkpoint(in);
  EXPECT_EQ(back.kind, m.kind);
  EXPECT_TRUE(back.params == m.params);
  EXPECT_EQ(back.cir_stats.std[0], 1.5f);
  EXPECT_EQ(checkpoint_bytes(back), bytes);
}

TEST(Checkpoint, CorruptionIsFormatError) {
  const std::string bytes = checkpoint_bytes(Model::create(ModelKind::CirOnly, tiny(), 1));
  std::string bad = bytes;
  bad[1] = 'X';
  std::stringstream a(bad);
  EXPECT_THROW(load_checkpoint(a), FormatError);
  std::stringstream b(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_checkpoint(b), FormatError);
  std::stringstream c(bytes + "\x01");
  EXPECT_THROW(load_checkpoint(c), FormatError);

  Model wrong = Model::create(ModelKind::CirOnly, tiny(), 1);
  wrong.kind = ModelKind::RgbOnly;
  std::stringstream d(checkpoint_bytes(wrong));
  EXPECT_THROW(load_checkpoint(d), FormatError);
  EXPECT_THROW(load_checkpoint(std::string("/nonexistent/model.snlm")), NotFoundError);
}

TEST(ModelKindNames, RoundTrip) {
  for (auto k : {ModelKind::Fusion, ModelKind::RgbOnly, ModelKind::CirOnly})
    EXPECT_EQ(model_kind_from_string(to_string(k)), k);
  EXPECT_THROW(model_kind_from_string("svm"), ConfigError);
}
