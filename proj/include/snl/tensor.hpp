#pragma once
// Dense row-major tensors and a reverse-mode gradient tape.
//
// Values are recorded on a Tape in creation order, which is a topological
// order of the computation; backward() replays the tape in reverse and sums
// gradients over fan-out.

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "snl/error.hpp"

namespace snl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& vector() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <class... I>
  T& operator()(I... idx) {
    return data_[offset(idx...)];
  }
  template <class... I>
  const T& operator()(I... idx) const {
    return data_[offset(idx...)];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  template <class... I>
  std::size_t offset(I... idx) const {
    const std::size_t ids[] = {static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizeof...(I); ++k) off = off * shape_[k] + ids[k];
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

template <class T>
class Tape;

// Handle to a value recorded on a tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  // Receives the tape and the gradient flowing into the node's output.
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Input that needs no gradient.
  Var<T> constant(Tensor<T> value) { return push(std::move(value), nullptr, false, {}); }

  // Leaf that accumulates a gradient.
  Var<T> variable(Tensor<T> value) { return push(std::move(value), nullptr, true, {}); }

  // Gradient-carrying leaf that borrows storage; `value` must outlive the tape.
  Var<T> reference(const Tensor<T>& value) { return push({}, &value, true, {}); }

  // Records an op output. The backward closure is dropped when no parent
  // needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn backward) {
    return record(std::move(value), std::span<const Var<T>>(parents.begin(), parents.size()), std::move(backward));
  }

  Var<T> record(Tensor<T> value, std::span<const Var<T>> parents, BackwardFn backward) {
    bool needs = false;
    for (const auto& p : parents) {
      if (&p.tape() != this) throw Error("mixing variables from different tapes");
      needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), nullptr, needs, needs ? std::move(backward) : BackwardFn{});
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient accumulated for a node, or nullptr if none reached it.
  const Tensor<T>* grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.grad.empty() && shape_size(value(id).shape()) != 0 ? nullptr : &n.grad;
  }
  const Tensor<T>* grad(const Var<T>& v) const { return grad(v.id()); }

  // Zero-initialized on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(value(id).shape());
    return n.grad;
  }

  void backward(const Var<T>& loss) {
    if (loss.value().size() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));
    if (!nodes_[loss.id()].requires_grad) return;
    grad_buffer(loss.id()).fill(T(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, const Tensor<T>* external, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), external, Tensor<T>{}, requires_grad, std::move(backward)});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

}  // namespace snl
