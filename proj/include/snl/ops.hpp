#pragma once
// Differentiable operators over Tape variables. Every op validates shapes up
// front; there is no implicit broadcasting beyond bias addition.
//
// Reductions (sums, means, norms, softmax denominators) accumulate in double.
// Matrix products run through Eigen in the storage precision.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <vector>

#include "snl/error.hpp"
#include "snl/tensor.hpp"

namespace snl {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<const RowMat<T>> cmat(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return {t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

template <class T>
Eigen::Map<RowMat<T>> mat(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return {t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

template <class T, class F>
void accumulate(Tape<T>& tape, const Var<T>& v, F&& f) {
  if (tape.requires_grad(v.id())) f(tape.grad_buffer(v.id()));
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T, class Fwd, class Deriv>
Var<T> unary(const Var<T>& x, Fwd fwd, Deriv deriv) {
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = fwd(xv[i]);
  return x.tape().record(std::move(y), {x}, [x, deriv](Tape<T>& tape, const Tensor<T>& g) {
    accumulate(tape, x, [&](Tensor<T>& gx) {
      const Tensor<T>& xv = tape.value(x.id());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(xv[i]);
    });
  });
}

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "add");
  Tensor<T> y = a.value();
  detail::add_into(y, b.value());
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    detail::accumulate(tape, a, [&](Tensor<T>& ga) { detail::add_into(ga, g); });
    detail::accumulate(tape, b, [&](Tensor<T>& gb) { detail::add_into(gb, g); });
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "sub");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    detail::accumulate(tape, a, [&](Tensor<T>& ga) { detail::add_into(ga, g); });
    detail::accumulate(tape, b, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    });
  });
}

// Elementwise product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "mul");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& av = tape.value(a.id());
    const Tensor<T>& bv = tape.value(b.id());
    detail::accumulate(tape, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    });
    detail::accumulate(tape, b, [&](Tensor<T>& gb) {
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    });
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> y = a.value();
  for (auto& v : y.values()) v *= s;
  return a.tape().record(std::move(y), {a}, [a, s](Tape<T>& tape, const Tensor<T>& g) {
    detail::accumulate(tape, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
    });
  });
}

// Sum of all elements; rank-0 result.
template <class T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().values()) acc += v;
  return a.tape().record(Tensor<T>(Shape{}, static_cast<T>(acc)), {a}, [a](Tape<T>& tape, const Tensor<T>& g) {
    detail::accumulate(tape, a, [&](Tensor<T>& ga) {
      for (auto& v : ga.values()) v += g[0];
    });
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  detail::require(a.value().size() > 0, "mean of empty tensor");
  return scale(sum(a), static_cast<T>(1.0 / static_cast<double>(a.value().size())));
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

// Output clamped into the open interval (0, 1) of the storage type.
template <class T>
Var<T> sigmoid(const Var<T>& x) {
  constexpr T lo = std::numeric_limits<T>::min();
  const T hi = std::nextafter(T(1), T(0));
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv[i];
    const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    y[i] = std::clamp(s, lo, hi);
  }
  return x.tape().record(std::move(y), {x}, [x](Tape<T>& tape, const Tensor<T>& g) {
    detail::accumulate(tape, x, [&](Tensor<T>& gx) {
      const Tensor<T>& xv = tape.value(x.id());
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T v = xv[i];
        const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        gx[i] += g[i] * s * (T(1) - s);
      }
    });
  });
}

namespace detail {

// tanh via exp; much faster than std::tanh, absolute error within a few ulp.
template <class T>
T fast_tanh(T u) {
  if (u > T(20)) return T(1);
  if (u < T(-20)) return T(-1);
  const T e = std::exp(T(2) * u);
  return (e - T(1)) / (e + T(1));
}

}  // namespace detail

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <class T>
Var<T> gelu(const Var<T>& x) {
  static constexpr T k0 = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T k1 = static_cast<T>(0.044715);
  return detail::unary(
      x, [](T v) { return T(0.5) * v * (T(1) + detail::fast_tanh(k0 * (v + k1 * v * v * v))); },
      [](T v) {
        const T t = detail::fast_tanh(k0 * (v + k1 * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * k0 * (T(1) + T(3) * k1 * v * v);
      });
}

// Softmax along the last axis of a rank-1 or rank-2 tensor.
template <class T>
Var<T> softmax_rows(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  detail::require(xv.rank() == 1 || xv.rank() == 2, "softmax expects rank 1 or 2");
  const std::size_t cols = xv.shape().back();
  const std::size_t rows = xv.size() / std::max<std::size_t>(cols, 1);
  Tensor<T> y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * cols;
    T* out = y.data() + r * cols;
    const T m = *std::max_element(in, in + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[c] = std::exp(in[c] - m);
      s += out[c];
    }
    const T inv = static_cast<T>(1.0 / s);
    for (std::size_t c = 0; c < cols; ++c) out[c] *= inv;
  }
  auto yv = std::make_shared<Tensor<T>>(y);
  return x.tape().record(std::move(y), {x}, [x, yv, rows, cols](Tape<T>& tape, const Tensor<T>& g) {
    detail::accumulate(tape, x, [&](Tensor<T>& gx) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = yv->data() + r * cols;
        const T* gr = g.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(gr[c]) * yr[c];
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += yr[c] * static_cast<T>(gr[c] - dot);
      }
    });
  });
}

// y = x W^T + b for x of shape (n) or (N, n), W (m, n), b (m).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  detail::require(wv.rank() == 2, "linear: weight must be rank 2, got " + shape_str(wv.shape()));
  const std::size_t m = wv.dim(0), n = wv.dim(1);
  detail::require(b.value().shape() == Shape{m}, "linear: bias shape " + shape_str(b.shape()));
  detail::require((xv.rank() == 1 || xv.rank() == 2) && xv.shape().back() == n,
                  "linear: input " + shape_str(xv.shape()) + " vs weight " + shape_str(wv.shape()));
  const std::size_t rows = xv.rank() == 1 ? 1 : xv.dim(0);
  Tensor<T> y(xv.rank() == 1 ? Shape{m} : Shape{rows, m});
  auto ym = detail::mat(y, rows, m);
  ym.noalias() = detail::cmat(xv, rows, n) * detail::cmat(wv, m, n).transpose();
  const T* bv = b.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j) ym(r, j) += bv[j];

  return x.tape().record(std::move(y), {x, w, b}, [x, w, b, rows, m, n](Tape<T>& tape, const Tensor<T>& g) {
    const auto gm = detail::cmat(g, rows, m);
    detail::accumulate(tape, x, [&](Tensor<T>& gx) {
      detail::mat(gx, rows, n).noalias() += gm * detail::cmat(tape.value(w.id()), m, n);
    });
    detail::accumulate(tape, w, [&](Tensor<T>& gw) {
      detail::mat(gw, m, n).noalias() += gm.transpose() * detail::cmat(tape.value(x.id()), rows, n);
    });
    detail::accumulate(tape, b, [&](Tensor<T>& gb) {
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t r = 0; r < rows; ++r) s += gm(r, j);
        gb[j] += static_cast<T>(s);
      }
    });
  });
}

// (N, K) x (K, M) -> (N, M)
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
                  "matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  Tensor<T> y(Shape{n, m});
  detail::mat(y, n, m).noalias() = detail::cmat(av, n, k) * detail::cmat(bv, k, m);
  return a.tape().record(std::move(y), {a, b}, [a, b, n, k, m](Tape<T>& tape, const Tensor<T>& g) {
    const auto gm = detail::cmat(g, n, m);
    detail::accumulate(tape, a, [&](Tensor<T>& ga) {
      detail::mat(ga, n, k).noalias() += gm * detail::cmat(tape.value(b.id()), k, m).transpose();
    });
    detail::accumulate(tape, b, [&](Tensor<T>& gb) {
      detail::mat(gb, k, m).noalias() += detail::cmat(tape.value(a.id()), n, k).transpose() * gm;
    });
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  const Tensor<T>& av = a.value();
  detail::require(av.rank() == 2, "transpose expects rank 2");
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor<T> y(Shape{c, r});
  detail::mat(y, c, r) = detail::cmat(av, r, c).transpose();
  return a.tape().record(std::move(y), {a}, [a, r, c](Tape<T>& tape, const Tensor<T>& g) {
    detail::accumulate(tape, a, [&](Tensor<T>& ga) { detail::mat(ga, r, c) += detail::cmat(g, c, r).transpose(); });
  });
}

// Columns [begin, begin + count) of a rank-2 tensor.
template <class T>
Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t count) {
  const Tensor<T>& av = a.value();
  detail::require(av.rank() == 2 && begin + count <= av.dim(1), "slice_cols out of range");
  const std::size_t rows = av.dim(0), cols = av.dim(1);
  Tensor<T> y(Shape{rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(av.data() + r * cols + begin, count, y.data() + r * count);
  return a.tape().record(std::move(y), {a}, [a, begin, count, rows, cols](Tape<T>& tape, const Tensor<T>& g) {
    detail::accumulate(tape, a, [&](Tensor<T>& ga) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < count; ++c) ga[r * cols + begin + c] += g[r * count + c];
    });
  });
}

template <class T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  detail::require(!parts.empty(), "concat_cols of nothing");
  const std::size_t rows = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require(p.value().rank() == 2 && p.dim(0) == rows, "concat_cols: row mismatch");
    total += p.dim(1);
  }
  Tensor<T> y(Shape{rows, total});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(p.value().data() + r * c, c, y.data() + r * total + off);
    offsets.push_back(off);
    off += c;
  }
  std::vector<Var<T>> ps(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(y), parts, [ps, offsets, rows, total](Tape<T>& tape, const Tensor<T>& g) {
    for (std::size_t k = 0; k < ps.size(); ++k)
      detail::accumulate(tape, ps[k], [&](Tensor<T>& gp) {
        const std::size_t c = gp.dim(1);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) gp[r * c + j] += g[r * total + offsets[k] + j];
      });
  });
}

// Per-row normalization to zero mean / unit variance followed by an affine
// map; eps = 1e-5.
template <class T>
Var<T> layer_norm(const Var<T>& z, const Var<T>& gain, const Var<T>& shift, double eps = 1e-5) {
  const Tensor<T>& zv = z.value();
  detail::require(zv.rank() == 2, "layer_norm expects (N, D)");
  const std::size_t rows = zv.dim(0), d = zv.dim(1);
  detail::require(gain.shape() == Shape{d} && shift.shape() == Shape{d}, "layer_norm: affine shape");
  auto xhat = std::make_shared<Tensor<T>>(zv.shape());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  Tensor<T> y(zv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = zv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    (*rstd)[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = static_cast<T>((in[j] - mu) * (*rstd)[r]);
      (*xhat)[r * d + j] = xh;
      y[r * d + j] = xh * gain.value()[j] + shift.value()[j];
    }
  }
  return z.tape().record(std::move(y), {z, gain, shift},
                         [z, gain, shift, xhat, rstd, rows, d](Tape<T>& tape, const Tensor<T>& g) {
                           const Tensor<T>& gv = tape.value(gain.id());
                           detail::accumulate(tape, z, [&](Tensor<T>& gz) {
                             for (std::size_t r = 0; r < rows; ++r) {
                               double m1 = 0.0, m2 = 0.0;
                               for (std::size_t j = 0; j < d; ++j) {
                                 const double gx = static_cast<double>(g[r * d + j]) * gv[j];
                                 m1 += gx;
                                 m2 += gx * (*xhat)[r * d + j];
                               }
                               m1 /= static_cast<double>(d);
                               m2 /= static_cast<double>(d);
                               for (std::size_t j = 0; j < d; ++j) {
                                 const double gx = static_cast<double>(g[r * d + j]) * gv[j];
                                 gz[r * d + j] += static_cast<T>((*rstd)[r] * (gx - m1 - (*xhat)[r * d + j] * m2));
                               }
                             }
                           });
                           detail::accumulate(tape, gain, [&](Tensor<T>& gg) {
                             for (std::size_t j = 0; j < d; ++j) {
                               double s = 0.0;
                               for (std::size_t r = 0; r < rows; ++r) s += static_cast<double>(g[r * d + j]) * (*xhat)[r * d + j];
                               gg[j] += static_cast<T>(s);
                             }
                           });
                           detail::accumulate(tape, shift, [&](Tensor<T>& gs) {
                             for (std::size_t j = 0; j < d; ++j) {
                               double s = 0.0;
                               for (std::size_t r = 0; r < rows; ++r) s += g[r * d + j];
                               gs[j] += static_cast<T>(s);
                             }
                           });
                         });
}

// Mean over the rows of an (N, D) tensor -> (D).
template <class T>
Var<T> mean_rows(const Var<T>& z) {
  const Tensor<T>& zv = z.value();
  detail::require(zv.rank() == 2 && zv.dim(0) > 0, "mean_rows expects non-empty (N, D)");
  const std::size_t rows = zv.dim(0), d = zv.dim(1);
  Tensor<T> y(Shape{d});
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0;
    for (std::size_t r = 0; r < rows; ++r) s += zv[r * d + j];
    y[j] = static_cast<T>(s / static_cast<double>(rows));
  }
  return z.tape().record(std::move(y), {z}, [z, rows, d](Tape<T>& tape, const Tensor<T>& g) {
    detail::accumulate(tape, z, [&](Tensor<T>& gz) {
      const T inv = static_cast<T>(1.0 / static_cast<double>(rows));
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gz[r * d + j] += g[j] * inv;
    });
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> y = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(y), {a}, [a](Tape<T>& tape, const Tensor<T>& g) {
    detail::accumulate(tape, a, [&](Tensor<T>& ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    });
  });
}

// Concatenation along the leading (channel) axis.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require(av.rank() >= 1 && av.rank() == bv.rank() &&
                      std::equal(av.shape().begin() + 1, av.shape().end(), bv.shape().begin() + 1),
                  "concat_channels: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Shape s = av.shape();
  s[0] += bv.dim(0);
  std::vector<T> data(av.values().begin(), av.values().end());
  data.insert(data.end(), bv.values().begin(), bv.values().end());
  const std::size_t na = av.size();
  return a.tape().record(Tensor<T>(std::move(s), std::move(data)), {a, b},
                         [a, b, na](Tape<T>& tape, const Tensor<T>& g) {
                           detail::accumulate(tape, a, [&](Tensor<T>& ga) {
                             for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                           });
                           detail::accumulate(tape, b, [&](Tensor<T>& gb) {
                             for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
                           });
                         });
}

namespace detail {

// Column matrix of shape (C*k*k, H*W) for a stride-1 convolution with zero
// padding `pad`.
template <class T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t pad, T* cols) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((ci * k + ky) * k + kx) * hw;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(pad);
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
        const std::size_t x_lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dx));
        const std::size_t x_hi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w),
                                                                                   static_cast<std::ptrdiff_t>(w) - dx));
        for (std::size_t y = 0; y < h; ++y) {
          T* out = row + y * w;
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) + dy;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h) || x_lo >= x_hi) {
            std::fill(out, out + w, T(0));
            continue;
          }
          std::fill(out, out + x_lo, T(0));
          const T* in = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t xx = x_lo; xx < x_hi; ++xx) out[xx] = in[static_cast<std::ptrdiff_t>(xx) + dx];
          std::fill(out + x_hi, out + w, T(0));
        }
      }
}

template <class T>
void col2im_add(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t pad, T* x) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((ci * k + ky) * k + kx) * hw;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(pad);
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
        const std::size_t x_lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dx));
        const std::size_t x_hi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w),
                                                                                   static_cast<std::ptrdiff_t>(w) - dx));
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) + dy;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          const T* in = row + y * w;
          T* out = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t xx = x_lo; xx < x_hi; ++xx) out[static_cast<std::ptrdiff_t>(xx) + dx] += in[xx];
        }
      }
}

}  // namespace detail

// Stride-1 convolution with zero padding (k - 1) / 2; spatial size preserved.
// input (C_in, H, W), weight (C_out, C_in, k, k), bias (C_out).
template <class T>
Var<T> conv2d_same(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  detail::require(xv.rank() == 3, "conv2d_same: input must be (C, H, W), got " + shape_str(xv.shape()));
  detail::require(wv.rank() == 4 && wv.dim(2) == wv.dim(3) && wv.dim(2) % 2 == 1,
                  "conv2d_same: weight must be (C_out, C_in, k, k) with odd k, got " + shape_str(wv.shape()));
  detail::require(wv.dim(1) == xv.dim(0), "conv2d_same: channel mismatch " + shape_str(xv.shape()) + " vs " +
                                              shape_str(wv.shape()));
  const std::size_t co = wv.dim(0), ci = wv.dim(1), k = wv.dim(2);
  detail::require(b.shape() == Shape{co}, "conv2d_same: bias shape " + shape_str(b.shape()));
  const std::size_t h = xv.dim(1), wd = xv.dim(2), hw = h * wd, pad = (k - 1) / 2;
  const std::size_t ckk = ci * k * k;

  auto cols = std::make_shared<std::vector<T>>(ckk * hw);
  detail::im2col(xv.data(), ci, h, wd, k, pad, cols->data());
  Tensor<T> y(Shape{co, h, wd});
  auto ym = detail::mat(y, co, hw);
  const Eigen::Map<const detail::RowMat<T>> cm(cols->data(), static_cast<Eigen::Index>(ckk),
                                               static_cast<Eigen::Index>(hw));
  ym.noalias() = detail::cmat(wv, co, ckk) * cm;
  for (std::size_t o = 0; o < co; ++o) ym.row(static_cast<Eigen::Index>(o)).array() += b.value()[o];

  return x.tape().record(
      std::move(y), {x, w, b}, [x, w, b, cols, co, ci, k, h, wd, hw, pad, ckk](Tape<T>& tape, const Tensor<T>& g) {
        const auto gm = detail::cmat(g, co, hw);
        const Eigen::Map<const detail::RowMat<T>> cm(cols->data(), static_cast<Eigen::Index>(ckk),
                                                     static_cast<Eigen::Index>(hw));
        detail::accumulate(tape, w, [&](Tensor<T>& gw) { detail::mat(gw, co, ckk).noalias() += gm * cm.transpose(); });
        detail::accumulate(tape, b, [&](Tensor<T>& gb) {
          for (std::size_t o = 0; o < co; ++o) {
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += g[o * hw + i];
            gb[o] += static_cast<T>(s);
          }
        });
        detail::accumulate(tape, x, [&](Tensor<T>& gx) {
          std::vector<T> gcols(ckk * hw);
          Eigen::Map<detail::RowMat<T>> gc(gcols.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(hw));
          gc.noalias() = detail::cmat(tape.value(w.id()), co, ckk).transpose() * gm;
          detail::col2im_add(gcols.data(), ci, h, wd, k, pad, gx.data());
        });
      });
}

// Max over regions [floor(i*H/h), floor((i+1)*H/h)) per axis. The gradient is
// routed to the first maximal element in row-major order.
template <class T>
Var<T> adaptive_max_pool(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  const Tensor<T>& xv = x.value();
  detail::require(xv.rank() == 3, "adaptive_max_pool expects (C, H, W)");
  const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  detail::require(out_h >= 1 && out_w >= 1 && out_h <= h && out_w <= w,
                  "adaptive_max_pool: cannot pool " + shape_str(xv.shape()) + " to " + std::to_string(out_h) + "x" +
                      std::to_string(out_w));
  Tensor<T> y(Shape{c, out_h, out_w});
  auto argmax = std::make_shared<std::vector<std::size_t>>(y.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < out_h; ++i) {
      const std::size_t r0 = i * h / out_h, r1 = (i + 1) * h / out_h;
      for (std::size_t j = 0; j < out_w; ++j) {
        const std::size_t c0 = j * w / out_w, c1 = (j + 1) * w / out_w;
        std::size_t best = (ch * h + r0) * w + c0;
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t cc = c0; cc < c1; ++cc) {
            const std::size_t idx = (ch * h + r) * w + cc;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (ch * out_h + i) * out_w + j;
        y[o] = xv[best];
        (*argmax)[o] = best;
      }
    }
  return x.tape().record(std::move(y), {x}, [x, argmax](Tape<T>& tape, const Tensor<T>& g) {
    detail::accumulate(tape, x, [&](Tensor<T>& gx) {
      for (std::size_t o = 0; o < argmax->size(); ++o) gx[(*argmax)[o]] += g[o];
    });
  });
}

namespace detail {

// Flat position of image element (ch, row, col) inside patchify's output.
inline std::size_t patch_offset(std::size_t c, std::size_t s, std::size_t p, std::size_t ch, std::size_t row,
                                std::size_t col) {
  const std::size_t per_side = s / p;
  const std::size_t n = (row / p) * per_side + col / p;
  const std::size_t f = (ch * p + row % p) * p + col % p;
  return n * (p * p * c) + f;
}

}  // namespace detail

// (C, S, S) -> (N, P*P*C), N = (S/P)^2. Patches in row-major order; inside a
// patch the feature index is channel-major: (c, row, col).
template <class T>
Var<T> patchify(const Var<T>& x, std::size_t p) {
  const Tensor<T>& xv = x.value();
  detail::require(xv.rank() == 3 && xv.dim(1) == xv.dim(2), "patchify expects a square (C, S, S) input");
  const std::size_t c = xv.dim(0), s = xv.dim(1);
  detail::require(p >= 1 && s % p == 0,
                  "patchify: side " + std::to_string(s) + " not divisible by patch " + std::to_string(p));
  const std::size_t n = (s / p) * (s / p);
  Tensor<T> y(Shape{n, p * p * c});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t col = 0; col < s; ++col)
        y[detail::patch_offset(c, s, p, ch, r, col)] = xv[(ch * s + r) * s + col];
  return x.tape().record(std::move(y), {x}, [x, c, s, p](Tape<T>& tape, const Tensor<T>& g) {
    detail::accumulate(tape, x, [&](Tensor<T>& gx) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t r = 0; r < s; ++r)
          for (std::size_t col = 0; col < s; ++col)
            gx[(ch * s + r) * s + col] += g[detail::patch_offset(c, s, p, ch, r, col)];
    });
  });
}

// Inverse of patchify on plain tensors.
template <class T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::size_t c, std::size_t s, std::size_t p) {
  if (patches.rank() != 2 || patches.dim(0) != (s / p) * (s / p) || patches.dim(1) != p * p * c || s % p != 0)
    throw ShapeError("unpatchify: shape " + shape_str(patches.shape()));
  Tensor<T> out(Shape{c, s, s});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t col = 0; col < s; ++col)
        out[(ch * s + r) * s + col] = patches[detail::patch_offset(c, s, p, ch, r, col)];
  return out;
}

inline constexpr double kBceEpsilon = 1e-7;

// Summed binary cross-entropy over all cells, probabilities clamped to
// [eps, 1 - eps]. Labels must be exactly 0 or 1.
template <class T>
Var<T> bce_sum(const Var<T>& prob, const Tensor<T>& labels) {
  const Tensor<T>& pv = prob.value();
  if (labels.size() != pv.size())
    throw ShapeError("bce: labels " + shape_str(labels.shape()) + " vs prob " + shape_str(pv.shape()));
  double loss = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T y = labels[i];
    if (y != T(0) && y != T(1)) throw DomainError("bce: label outside {0, 1}");
    const double p = std::clamp(static_cast<double>(pv[i]), kBceEpsilon, 1.0 - kBceEpsilon);
    loss -= y == T(1) ? std::log(p) : std::log(1.0 - p);
  }
  auto lab = std::make_shared<Tensor<T>>(labels);
  return prob.tape().record(Tensor<T>(Shape{}, static_cast<T>(loss)), {prob},
                            [prob, lab](Tape<T>& tape, const Tensor<T>& g) {
                              detail::accumulate(tape, prob, [&](Tensor<T>& gp) {
                                const Tensor<T>& pv = tape.value(prob.id());
                                for (std::size_t i = 0; i < gp.size(); ++i) {
                                  const double p = pv[i];
                                  if (p <= kBceEpsilon || p >= 1.0 - kBceEpsilon) continue;
                                  const double d = (*lab)[i] == T(1) ? -1.0 / p : 1.0 / (1.0 - p);
                                  gp[i] += static_cast<T>(g[0] * d);
                                }
                              });
                            });
}

}  // namespace snl
