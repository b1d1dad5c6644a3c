#pragma once
// Image/CIR fusion network, the two single-modality baselines, training,
// fine-tuning, evaluation and the "SNLM" checkpoint format.
//
// SNLM layout (little-endian):
//   "SNLM" | u32 version | u32 config_len | config (UTF-8 JSON)
//   | u32 param_count, then per parameter
//   u32 name_len | name | u32 rank | u32 dims[rank] | f32 data[prod(dims)]

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "snl/binary_io.hpp"
#include "snl/dataset.hpp"
#include "snl/error.hpp"
#include "snl/nn.hpp"
#include "snl/ops.hpp"
#include "snl/tensor.hpp"

namespace snl {

enum class ModelKind { Fusion, RgbOnly, CirOnly };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::Fusion: return "fusion";
    case ModelKind::RgbOnly: return "rgb_only";
    case ModelKind::CirOnly: return "cir_only";
  }
  return "fusion";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "fusion") return ModelKind::Fusion;
  if (s == "rgb_only" || s == "rgb") return ModelKind::RgbOnly;
  if (s == "cir_only" || s == "cir") return ModelKind::CirOnly;
  throw ConfigError("unknown model kind '" + s + "'");
}

struct ModelConfig {
  int image_side = 96;  // S, ViT input resolution
  int patch = 8;        // P
  int embed_dim = 64;   // D
  int depth = 2;        // L encoder blocks
  int heads = 4;
  int branch_channels = 16;  // F
  int grid = 30;             // g
  int fusion_depth = 3;
  int classifier_depth = 2;  // 3x3 convs halving channels before the 1x1
  int stem_channels = 8;
  int ffn_ratio = 4;
  int rgb_head_depth = 3;
  int rgb_head_channels = 16;
  int mlp_hidden_ratio = 4;  // CIR-only hidden width = ratio * g^2
  bool paper_scale = false;

  static ModelConfig desk() { return {}; }

  static ModelConfig paper() {
    ModelConfig c;
    c.image_side = 224;
    c.patch = 16;
    c.embed_dim = 768;
    c.depth = 12;
    c.heads = 12;
    c.branch_channels = 128;
    c.paper_scale = true;
    return c;
  }

  std::size_t tokens() const {
    const auto n = static_cast<std::size_t>(image_side / patch);
    return n * n;
  }

  void validate() const {
    auto positive = [](int v, const char* what) {
      if (v < 1) throw ConfigError(std::string("model: ") + what + " must be >= 1");
    };
    positive(image_side, "image_side");
    positive(patch, "patch");
    positive(embed_dim, "embed_dim");
    positive(depth, "depth");
    positive(heads, "heads");
    positive(branch_channels, "branch_channels");
    positive(grid, "grid");
    positive(stem_channels, "stem_channels");
    positive(ffn_ratio, "ffn_ratio");
    positive(rgb_head_channels, "rgb_head_channels");
    positive(mlp_hidden_ratio, "mlp_hidden_ratio");
    if (fusion_depth < 0 || classifier_depth < 0 || rgb_head_depth < 0)
      throw ConfigError("model: layer counts must be >= 0");
    if (image_side % patch != 0) throw ConfigError("model: image_side must be divisible by patch");
    if (embed_dim % heads != 0) throw ConfigError("model: embed_dim must be divisible by heads");
    if ((2 * branch_channels) % (1 << classifier_depth) != 0)
      throw ConfigError("model: 2*branch_channels must be divisible by 2^classifier_depth");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"image_side", c.image_side},
          {"patch", c.patch},
          {"embed_dim", c.embed_dim},
          {"depth", c.depth},
          {"heads", c.heads},
          {"branch_channels", c.branch_channels},
          {"grid", c.grid},
          {"fusion_depth", c.fusion_depth},
          {"classifier_depth", c.classifier_depth},
          {"stem_channels", c.stem_channels},
          {"ffn_ratio", c.ffn_ratio},
          {"rgb_head_depth", c.rgb_head_depth},
          {"rgb_head_channels", c.rgb_head_channels},
          {"mlp_hidden_ratio", c.mlp_hidden_ratio},
          {"paper_scale", c.paper_scale}};
}

// Missing keys keep their defaults; `paper_scale: true` starts from the
// paper-scale preset before applying the other keys.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  ModelConfig c = j.value("paper_scale", false) ? ModelConfig::paper() : ModelConfig::desk();
  try {
    c.image_side = j.value("image_side", c.image_side);
    c.patch = j.value("patch", c.patch);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.branch_channels = j.value("branch_channels", c.branch_channels);
    c.grid = j.value("grid", c.grid);
    c.fusion_depth = j.value("fusion_depth", c.fusion_depth);
    c.classifier_depth = j.value("classifier_depth", c.classifier_depth);
    c.stem_channels = j.value("stem_channels", c.stem_channels);
    c.ffn_ratio = j.value("ffn_ratio", c.ffn_ratio);
    c.rgb_head_depth = j.value("rgb_head_depth", c.rgb_head_depth);
    c.rgb_head_channels = j.value("rgb_head_channels", c.rgb_head_channels);
    c.mlp_hidden_ratio = j.value("mlp_hidden_ratio", c.mlp_hidden_ratio);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

template <class T>
ModelParams<T> init_params(ModelKind kind, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Initializer init(seed);
  ModelParams<T> p;
  const auto g = static_cast<std::size_t>(cfg.grid);
  const auto cs = static_cast<std::size_t>(cfg.stem_channels);
  if (kind == ModelKind::CirOnly) {
    const std::size_t hidden = static_cast<std::size_t>(cfg.mlp_hidden_ratio) * g * g;
    add_linear(p, init, "mlp.fc1", hidden, 2 * g * g);
    add_linear(p, init, "mlp.fc2", g * g, hidden);
    return p;
  }
  add_conv(p, init, "stem.0", cs, 3, 3);
  add_conv(p, init, "stem.1", cs, cs, 3);
  if (kind == ModelKind::RgbOnly) {
    std::size_t c = cs;
    for (int i = 0; i < cfg.rgb_head_depth; ++i) {
      add_conv(p, init, "head." + std::to_string(i), static_cast<std::size_t>(cfg.rgb_head_channels), c, 3);
      c = static_cast<std::size_t>(cfg.rgb_head_channels);
    }
    add_conv(p, init, "head.out", 1, c, 1);
    return p;
  }

  const auto d = static_cast<std::size_t>(cfg.embed_dim);
  const auto pp = static_cast<std::size_t>(cfg.patch);
  const auto f = static_cast<std::size_t>(cfg.branch_channels);
  add_linear(p, init, "vit.embed", d, pp * pp * cs);
  p.add("vit.pos", init.uniform<T>({cfg.tokens(), d}, 0.02));
  for (int l = 0; l < cfg.depth; ++l)
    add_encoder_block(p, init, "vit.block" + std::to_string(l), d, static_cast<std::size_t>(cfg.ffn_ratio) * d);
  add_norm(p, "vit.norm", d);
  add_linear(p, init, "vit.head", f * g * g, d);
  add_conv(p, init, "cnn.0", f, 2, 3);
  add_conv(p, init, "cnn.1", f, f, 3);
  for (int i = 0; i < cfg.fusion_depth; ++i) add_conv(p, init, "fuse." + std::to_string(i), 2 * f, 2 * f, 3);
  std::size_t c = 2 * f;
  for (int i = 0; i < cfg.classifier_depth; ++i) {
    add_conv(p, init, "cls." + std::to_string(i), c / 2, c, 3);
    c /= 2;
  }
  add_conv(p, init, "cls.out", 1, c, 1);
  return p;
}

template <class T>
Var<T> stem(const Bound<T>& b, const Var<T>& x_rgb) {
  return relu(conv(b, "stem.1", relu(conv(b, "stem.0", x_rgb))));
}

// Token matrix (N, D) after the final encoder norm.
template <class T>
Var<T> vit_tokens(const Bound<T>& b, const ModelConfig& cfg, const Var<T>& x_rgb) {
  const auto s = static_cast<std::size_t>(cfg.image_side);
  const Var<T> pooled = adaptive_max_pool(stem(b, x_rgb), s, s);
  Var<T> z = add(dense(b, "vit.embed", patchify(pooled, static_cast<std::size_t>(cfg.patch))), b["vit.pos"]);
  for (int l = 0; l < cfg.depth; ++l)
    z = encoder_block(b, "vit.block" + std::to_string(l), z, static_cast<std::size_t>(cfg.heads));
  return norm(b, "vit.norm", z);
}

template <class T>
Var<T> vit_branch(const Bound<T>& b, const ModelConfig& cfg, const Var<T>& x_rgb) {
  const auto g = static_cast<std::size_t>(cfg.grid);
  const Var<T> v = mean_rows(vit_tokens(b, cfg, x_rgb));
  return reshape(dense(b, "vit.head", v), {static_cast<std::size_t>(cfg.branch_channels), g, g});
}

template <class T>
Var<T> cnn_branch(const Bound<T>& b, const Var<T>& x_cir) {
  if (x_cir.value().rank() != 3 || x_cir.dim(0) != 2) throw ShapeError("cnn branch expects a (2, g, g) input");
  return conv(b, "cnn.1", relu(conv(b, "cnn.0", x_cir)));
}

// Returns the probability map (g, g).
template <class T>
Var<T> fuse_and_classify(const Bound<T>& b, const ModelConfig& cfg, const Var<T>& f_vit, const Var<T>& f_cnn) {
  if (f_vit.shape() != f_cnn.shape())
    throw ShapeError("fusion: branch shapes " + shape_str(f_vit.shape()) + " and " + shape_str(f_cnn.shape()));
  Var<T> f = concat_channels(f_vit, f_cnn);
  for (int i = 0; i < cfg.fusion_depth; ++i) f = relu(conv(b, "fuse." + std::to_string(i), f));
  for (int i = 0; i < cfg.classifier_depth; ++i) f = relu(conv(b, "cls." + std::to_string(i), f));
  const Var<T> logits = conv(b, "cls.out", f);
  return sigmoid(reshape(logits, {logits.dim(1), logits.dim(2)}));
}

template <class T>
Var<T> rgb_only_forward(const Bound<T>& b, const ModelConfig& cfg, const Var<T>& x_rgb) {
  const auto g = static_cast<std::size_t>(cfg.grid);
  Var<T> f = adaptive_max_pool(stem(b, x_rgb), g, g);
  for (int i = 0; i < cfg.rgb_head_depth; ++i) f = relu(conv(b, "head." + std::to_string(i), f));
  return sigmoid(reshape(conv(b, "head.out", f), {g, g}));
}

template <class T>
Var<T> cir_only_forward(const Bound<T>& b, const ModelConfig& cfg, const Var<T>& x_cir) {
  const auto g = static_cast<std::size_t>(cfg.grid);
  if (x_cir.value().size() != 2 * g * g) throw ShapeError("cir-only model expects 2*g*g inputs");
  const Var<T> h = relu(dense(b, "mlp.fc1", reshape(x_cir, {2 * g * g})));
  return sigmoid(reshape(dense(b, "mlp.fc2", h), {g, g}));
}

template <class T>
Var<T> forward(ModelKind kind, const ModelConfig& cfg, const Bound<T>& b, const Var<T>& x_rgb, const Var<T>& x_cir) {
  switch (kind) {
    case ModelKind::RgbOnly: return rgb_only_forward(b, cfg, x_rgb);
    case ModelKind::CirOnly: return cir_only_forward(b, cfg, x_cir);
    case ModelKind::Fusion: break;
  }
  return fuse_and_classify(b, cfg, vit_branch(b, cfg, x_rgb), cnn_branch(b, x_cir));
}

struct Model {
  ModelKind kind = ModelKind::Fusion;
  ModelConfig config;
  ModelParams<float> params;
  CirStats cir_stats;  // normalization the model was trained with

  static Model create(ModelKind kind, const ModelConfig& cfg, std::uint64_t seed) {
    return Model{kind, cfg, init_params<float>(kind, cfg, seed), {}};
  }
};

// Network inputs for one sample.
template <class T>
struct SampleTensors {
  Tensor<T> image;   // (3, H, H)
  Tensor<T> cir;     // (2, g, g)
  Tensor<T> labels;  // (g, g)
};

template <class T>
SampleTensors<T> to_tensors(const Sample& s) {
  const auto h = static_cast<std::size_t>(s.image.resolution);
  const auto g = static_cast<std::size_t>(s.cir.g);
  SampleTensors<T> out;
  out.image = Tensor<T>({3, h, h}, std::vector<T>(s.image.data.begin(), s.image.data.end()));
  std::vector<T> cir(s.cir.re.begin(), s.cir.re.end());
  cir.insert(cir.end(), s.cir.im.begin(), s.cir.im.end());
  out.cir = Tensor<T>({2, g, g}, std::move(cir));
  out.labels = Tensor<T>({g, g}, std::vector<T>(s.labels.values.begin(), s.labels.values.end()));
  return out;
}

struct Prediction {
  int g = 0;
  std::vector<float> prob;
  std::vector<std::uint8_t> hard;
};

inline std::vector<std::uint8_t> decide(std::span<const float> prob) {
  std::vector<std::uint8_t> hard(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) hard[i] = prob[i] >= 0.5f ? 1 : 0;
  return hard;
}

inline Prediction make_prediction(int g, std::vector<float> prob) {
  Prediction p{g, std::move(prob), {}};
  p.hard = decide(p.prob);
  return p;
}

template <class T>
Tensor<T> predict_probs(const Model& m, const ModelParams<T>& params, const SampleTensors<T>& in) {
  Tape<T> tape;
  Bound<T> b(tape, params);
  return forward(m.kind, m.config, b, tape.constant(in.image), tape.constant(in.cir)).value();
}

inline Prediction predict(const Model& m, const Sample& s) {
  const auto probs = predict_probs(m, m.params, to_tensors<float>(s));
  return make_prediction(s.cir.g, probs.vector());
}

// Mean over the batch of per-sample summed cell BCE.
template <class T>
Var<T> bce_loss(std::span<const Var<T>> probs, std::span<const Tensor<T>> labels) {
  if (probs.empty() || probs.size() != labels.size()) throw ShapeError("bce_loss: batch size mismatch");
  Var<T> total = bce_sum(probs[0], labels[0]);
  for (std::size_t i = 1; i < probs.size(); ++i) total = add(total, bce_sum(probs[i], labels[i]));
  return scale(total, static_cast<T>(1.0 / static_cast<double>(probs.size())));
}

struct EvalResult {
  double accuracy = 0.0;
  std::array<std::array<std::uint64_t, 2>, 2> confusion{};  // [true][predicted]
  std::vector<double> per_snapshot;
  std::uint64_t cells = 0;
};

using Predictor = std::function<Prediction(const Sample&)>;

inline EvalResult evaluate(const Predictor& predictor, const Dataset& ds, const std::vector<std::size_t>& ids,
                           int threads = 1) {
  if (ids.empty()) throw DomainError("evaluate: empty sample list");
  std::vector<Prediction> preds(ids.size());
  parallel_for(ids.size(), threads, [&](std::size_t i) { preds[i] = predictor(ds.samples.at(ids[i])); });
  EvalResult r;
  r.per_snapshot.reserve(ids.size());
  std::uint64_t correct = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& labels = ds.samples[ids[i]].labels.values;
    if (preds[i].hard.size() != labels.size()) throw ShapeError("evaluate: prediction/label size mismatch");
    std::uint64_t ok = 0;
    for (std::size_t c = 0; c < labels.size(); ++c) {
      ++r.confusion[labels[c]][preds[i].hard[c]];
      ok += labels[c] == preds[i].hard[c];
    }
    correct += ok;
    r.cells += labels.size();
    r.per_snapshot.push_back(static_cast<double>(ok) / static_cast<double>(labels.size()));
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.cells);
  return r;
}

inline EvalResult evaluate(const Model& m, const Dataset& ds, const std::vector<std::size_t>& ids, int threads = 1) {
  return evaluate([&m](const Sample& s) { return predict(m, s); }, ds, ids, threads);
}

// Accuracy of always predicting the more frequent class of `ids`.
inline double majority_rate(const Dataset& ds, const std::vector<std::size_t>& ids) {
  std::uint64_t ones = 0, total = 0;
  for (auto id : ids) {
    for (auto v : ds.samples.at(id).labels.values) ones += v;
    total += ds.samples[id].labels.values.size();
  }
  if (total == 0) throw DomainError("majority_rate: no cells");
  const double f = static_cast<double>(ones) / static_cast<double>(total);
  return std::max(f, 1.0 - f);
}

struct TrainConfig {
  int batch_size = 8;
  int epochs = 10;
  AdamConfig adam;
  std::uint64_t seed = 0;
  int threads = 1;
  long max_steps = 0;  // 0 = no cap
  bool eval_each_epoch = true;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (!(adam.lr > 0.0)) throw ConfigError("train: learning rate must be positive");
    if (threads < 1) throw ConfigError("train: threads must be >= 1");
  }
};

struct EpochStats {
  int epoch = 0;  // 0 = before any update
  double train_loss = 0.0;
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  long steps = 0;
};

namespace detail {

// Forward + backward for one sample, adding weight * grad into `acc`.
// Returns the sample's summed BCE.
template <class T>
double accumulate_sample_grad(const Model& m, const ModelParams<T>& params, const SampleTensors<T>& in, T weight,
                              std::vector<Tensor<T>>& acc) {
  Tape<T> tape;
  Bound<T> b(tape, params);
  const Var<T> prob = forward(m.kind, m.config, b, tape.constant(in.image), tape.constant(in.cir));
  const Var<T> loss = bce_sum(prob, in.labels);
  tape.backward(loss);
  const auto& vars = b.vars();
  for (std::size_t i = 0; i < vars.size(); ++i) {
    const Tensor<T>* g = tape.grad(vars[i]);
    if (!g || g->empty()) continue;
    if (acc[i].empty()) acc[i] = Tensor<T>(g->shape());
    T* dst = acc[i].data();
    const T* src = g->data();
    for (std::size_t j = 0; j < g->size(); ++j) dst[j] += weight * src[j];
  }
  return static_cast<double>(loss.value()[0]);
}

inline double mean_loss(const Model& m, const std::vector<SampleTensors<float>>& inputs,
                        const std::vector<std::size_t>& ids, int threads) {
  std::vector<double> losses(ids.size());
  parallel_for(ids.size(), threads, [&](std::size_t i) {
    Tape<float> tape;
    Bound<float> b(tape, m.params);
    const auto& in = inputs[ids[i]];
    losses[i] = bce_sum(forward(m.kind, m.config, b, tape.constant(in.image), tape.constant(in.cir)), in.labels)
                    .value()[0];
  });
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(std::max<std::size_t>(ids.size(), 1));
}

}  // namespace detail

// Adam on shuffled mini-batches. With threads > 1 each worker accumulates a
// contiguous slice of the batch and slices are summed in worker order.
inline TrainHistory optimize(Model& m, const Dataset& ds, const std::vector<std::size_t>& train_ids,
                             const std::vector<std::size_t>& test_ids, const TrainConfig& cfg) {
  cfg.validate();
  if (train_ids.empty()) throw DomainError("train: empty training split");
  std::vector<SampleTensors<float>> inputs(ds.samples.size());
  std::vector<bool> needed(ds.samples.size(), false);
  for (auto id : train_ids) needed.at(id) = true;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    if (needed[i]) inputs[i] = to_tensors<float>(ds.samples[i]);

  auto test_acc = [&]() {
    if (!cfg.eval_each_epoch || test_ids.empty()) return std::numeric_limits<double>::quiet_NaN();
    return evaluate(m, ds, test_ids, cfg.threads).accuracy;
  };

  TrainHistory hist;
  hist.epochs.push_back({0, detail::mean_loss(m, inputs, train_ids, cfg.threads), test_acc()});

  Adam<float> opt(m.params, cfg.adam);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order = train_ids;
  const std::size_t nparams = m.params.size();
  const auto workers = static_cast<std::size_t>(cfg.threads);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.max_steps > 0 && hist.steps >= cfg.max_steps) break;
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      if (cfg.max_steps > 0 && hist.steps >= cfg.max_steps) break;
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t n = end - start;
      const float weight = static_cast<float>(1.0 / static_cast<double>(n));
      const std::size_t w = std::min(workers, n);
      std::vector<std::vector<Tensor<float>>> acc(w, std::vector<Tensor<float>>(nparams));
      std::vector<double> losses(n);
      parallel_for(w, static_cast<int>(w), [&](std::size_t k) {
        const std::size_t lo = start + k * n / w, hi = start + (k + 1) * n / w;
        for (std::size_t i = lo; i < hi; ++i)
          losses[i - start] = detail::accumulate_sample_grad(m, m.params, inputs[order[i]], weight, acc[k]);
      });
      for (std::size_t k = 1; k < w; ++k)
        for (std::size_t i = 0; i < nparams; ++i) {
          if (acc[k][i].empty()) continue;
          if (acc[0][i].empty()) {
            acc[0][i] = std::move(acc[k][i]);
            continue;
          }
          detail::add_into(acc[0][i], acc[k][i]);
        }
      opt.step(m.params, acc[0]);
      ++hist.steps;
      for (double l : losses) epoch_loss += l;
      seen += n;
    }
    hist.epochs.push_back({epoch, epoch_loss / static_cast<double>(std::max<std::size_t>(seen, 1)), test_acc()});
  }
  return hist;
}

inline TrainHistory train(Model& m, const Dataset& ds, const Split& split, const TrainConfig& cfg) {
  return optimize(m, ds, split.train_ids, split.test_ids, cfg);
}

inline TrainConfig fine_tune_defaults() {
  TrainConfig c;
  c.epochs = 30;
  c.adam.lr = 1e-4;
  c.eval_each_epoch = false;
  return c;
}

// Continues training every parameter on `subset`; an empty subset returns the
// model unchanged.
inline Model fine_tune(const Model& pretrained, const Dataset& ds, const std::vector<std::size_t>& subset,
                       const TrainConfig& cfg = fine_tune_defaults()) {
  Model m = pretrained;
  if (subset.empty()) return m;
  TrainConfig c = cfg;
  c.eval_each_epoch = false;
  optimize(m, ds, subset, {}, c);
  return m;
}

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Model& m, std::ostream& os) {
  nlohmann::json cfg = {{"kind", to_string(m.kind)},
                        {"config", to_json(m.config)},
                        {"cir_mean", {m.cir_stats.mean[0], m.cir_stats.mean[1]}},
                        {"cir_std", {m.cir_stats.std[0], m.cir_stats.std[1]}}};
  os.write("SNLM", 4);
  io::write<std::uint32_t>(os, kCheckpointVersion);
  io::write_string(os, cfg.dump());
  io::write<std::uint32_t>(os, static_cast<std::uint32_t>(m.params.size()));
  for (const auto& e : m.params.entries()) {
    io::write_string(os, e.name);
    io::write<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) io::write<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    io::write_array(os, e.value.data(), e.value.size());
  }
  if (!os) throw Error("failed writing checkpoint");
}

inline void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw NotFoundError("cannot open " + path + " for writing");
  save_checkpoint(m, os);
}

inline Model load_checkpoint(std::istream& is) {
  io::expect_magic(is, "SNLM");
  const auto version = io::read<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Model m;
  try {
    const auto cfg = nlohmann::json::parse(io::read_string(is));
    m.kind = model_kind_from_string(cfg.at("kind").get<std::string>());
    m.config = model_config_from_json(cfg.at("config"));
    for (int ch = 0; ch < 2; ++ch) {
      m.cir_stats.mean[ch] = cfg.at("cir_mean").at(ch).get<float>();
      m.cir_stats.std[ch] = cfg.at("cir_std").at(ch).get<float>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  const auto count = io::read<std::uint32_t>(is);
  if (count > (1u << 20)) throw FormatError("implausible parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = io::read_string(is, 4096);
    const auto rank = io::read<std::uint32_t>(is);
    if (rank > 8) throw FormatError("implausible rank for " + name);
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = io::read<std::uint32_t>(is);
      n *= d;
      if (n > (std::size_t{1} << 32)) throw FormatError("implausible size for " + name);
    }
    std::vector<float> data(n);
    io::read_array(is, data.data(), n);
    try {
      m.params.add(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
    } catch (const ConfigError& e) {
      throw FormatError(e.what());
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint");
  const auto expected = init_params<float>(m.kind, m.config, 0);
  if (expected.size() != m.params.size()) throw FormatError("checkpoint parameter set does not match its config");
  for (const auto& e : expected.entries()) {
    if (!m.params.contains(e.name)) throw FormatError("checkpoint lacks parameter " + e.name);
    if (m.params[e.name].shape() != e.value.shape()) throw FormatError("checkpoint shape mismatch for " + e.name);
  }
  return m;
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("cannot open " + path);
  return load_checkpoint(is);
}

}  // namespace snl
