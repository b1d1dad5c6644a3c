#pragma once
// Named parameter storage, transformer building blocks and the Adam optimizer.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "snl/error.hpp"
#include "snl/ops.hpp"
#include "snl/tensor.hpp"

namespace snl {

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

// Ordered set of learnable tensors.
template <class T>
class ModelParams {
 public:
  Tensor<T>& add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), std::move(value)});
    return entries_.back().value;
  }

  const Tensor<T>& operator[](const std::string& name) const { return entries_[index_of(name)].value; }
  Tensor<T>& operator[](const std::string& name) { return entries_[index_of(name)].value; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw NotFoundError("no parameter named " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return entries_.size(); }
  const std::vector<NamedTensor<T>>& entries() const { return entries_; }
  std::vector<NamedTensor<T>>& entries() { return entries_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) { return a.entries_ == b.entries_; }

 private:
  std::vector<NamedTensor<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
bool operator==(const NamedTensor<T>& a, const NamedTensor<T>& b) {
  return a.name == b.name && a.value == b.value;
}

// Parameters bound onto one tape as gradient-carrying references.
template <class T>
class Bound {
 public:
  Bound(Tape<T>& tape, const ModelParams<T>& params) : params_(&params) {
    vars_.reserve(params.size());
    for (const auto& e : params.entries()) vars_.push_back(tape.reference(e.value));
  }

  Var<T> operator[](const std::string& name) const { return vars_[params_->index_of(name)]; }
  const std::vector<Var<T>>& vars() const { return vars_; }

 private:
  const ModelParams<T>* params_;
  std::vector<Var<T>> vars_;
};

// Uniform fan-in initializer: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <class T>
  Tensor<T> fan_in(Shape shape, std::size_t fan) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan));
    return uniform<T>(std::move(shape), bound);
  }

  template <class T>
  Tensor<T> uniform(Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng_));
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

template <class T>
void add_conv(ModelParams<T>& p, Initializer& init, const std::string& name, std::size_t c_out, std::size_t c_in,
              std::size_t k) {
  p.add(name + ".weight", init.fan_in<T>({c_out, c_in, k, k}, c_in * k * k));
  p.add(name + ".bias", Tensor<T>(Shape{c_out}));
}

template <class T>
void add_linear(ModelParams<T>& p, Initializer& init, const std::string& name, std::size_t out, std::size_t in) {
  p.add(name + ".weight", init.fan_in<T>({out, in}, in));
  p.add(name + ".bias", Tensor<T>(Shape{out}));
}

template <class T>
void add_norm(ModelParams<T>& p, const std::string& name, std::size_t d) {
  p.add(name + ".gain", Tensor<T>(Shape{d}, T(1)));
  p.add(name + ".shift", Tensor<T>(Shape{d}));
}

template <class T>
Var<T> conv(const Bound<T>& b, const std::string& name, const Var<T>& x) {
  return conv2d_same(x, b[name + ".weight"], b[name + ".bias"]);
}

template <class T>
Var<T> dense(const Bound<T>& b, const std::string& name, const Var<T>& x) {
  return linear(x, b[name + ".weight"], b[name + ".bias"]);
}

template <class T>
Var<T> norm(const Bound<T>& b, const std::string& name, const Var<T>& x) {
  return layer_norm(x, b[name + ".gain"], b[name + ".shift"]);
}

template <class T>
void add_attention(ModelParams<T>& p, Initializer& init, const std::string& name, std::size_t d) {
  for (const char* proj : {".q", ".k", ".v", ".o"}) add_linear(p, init, name + proj, d, d);
}

// Scaled dot-product attention per head over an (N, D) token matrix, heads
// concatenated and passed through the output projection.
template <class T>
Var<T> multi_head_self_attention(const Bound<T>& b, const std::string& name, const Var<T>& z, std::size_t heads) {
  const std::size_t d = z.dim(1);
  if (heads == 0 || d % heads != 0)
    throw ShapeError("attention: embed dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                     " heads");
  const std::size_t dh = d / heads;
  const Var<T> q = dense(b, name + ".q", z);
  const Var<T> k = dense(b, name + ".k", z);
  const Var<T> v = dense(b, name + ".v", z);
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Var<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Var<T> qh = slice_cols(q, h * dh, dh);
    const Var<T> kh = slice_cols(k, h * dh, dh);
    const Var<T> vh = slice_cols(v, h * dh, dh);
    const Var<T> attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    outs.push_back(matmul(attn, vh));
  }
  return dense(b, name + ".o", concat_cols<T>(outs));
}

template <class T>
void add_feed_forward(ModelParams<T>& p, Initializer& init, const std::string& name, std::size_t d,
                      std::size_t hidden) {
  add_linear(p, init, name + ".fc1", hidden, d);
  add_linear(p, init, name + ".fc2", d, hidden);
}

// Tokenwise two-layer MLP with GELU.
template <class T>
Var<T> feed_forward(const Bound<T>& b, const std::string& name, const Var<T>& z) {
  return dense(b, name + ".fc2", gelu(dense(b, name + ".fc1", z)));
}

template <class T>
void add_encoder_block(ModelParams<T>& p, Initializer& init, const std::string& name, std::size_t d,
                       std::size_t hidden) {
  add_norm(p, name + ".norm1", d);
  add_attention(p, init, name + ".attn", d);
  add_norm(p, name + ".norm2", d);
  add_feed_forward(p, init, name + ".ffn", d, hidden);
}

// Pre-norm residual block: z + MSA(LN(z)), then + FFN(LN(.)).
template <class T>
Var<T> encoder_block(const Bound<T>& b, const std::string& name, const Var<T>& z, std::size_t heads) {
  const Var<T> a = add(z, multi_head_self_attention(b, name + ".attn", norm(b, name + ".norm1", z), heads));
  return add(a, feed_forward(b, name + ".ffn", norm(b, name + ".norm2", a)));
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
class Adam {
 public:
  Adam(const ModelParams<T>& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& e : params.entries()) {
      m_.emplace_back(e.value.size(), 0.0);
      v_.emplace_back(e.value.size(), 0.0);
    }
  }

  void step(ModelParams<T>& params, const std::vector<Tensor<T>>& grads) {
    ++t_;
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const float inv_c1 = static_cast<float>(1.0 / (1.0 - std::pow(cfg_.beta1, static_cast<double>(t_))));
    const float inv_c2 = static_cast<float>(1.0 / (1.0 - std::pow(cfg_.beta2, static_cast<double>(t_))));
    const float lr = static_cast<float>(cfg_.lr), eps = static_cast<float>(cfg_.eps);
    auto& entries = params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (grads[i].empty()) continue;
      T* p = entries[i].value.data();
      const T* g = grads[i].data();
      float* m = m_[i].data();
      float* v = v_[i].data();
      const std::size_t n = m_[i].size();
      for (std::size_t j = 0; j < n; ++j) {
        const float gj = static_cast<float>(g[j]);
        m[j] = b1 * m[j] + (1.0f - b1) * gj;
        v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
        p[j] = static_cast<T>(p[j] - lr * (m[j] * inv_c1) / (std::sqrt(v[j] * inv_c2) + eps));
      }
    }
  }

  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  long t_ = 0;
};

}  // namespace snl
