// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "vaguide/diff/tensor.hpp"

namespace vaguide::diff {

template <class T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; the tape owns storage.
template <class T>
class DiffArray {
 public:
  DiffArray() = default;
  DiffArray(Tape<T> *tape, int id) : tape_(tape), id_(id) {}

  const Shape &shape() const;
  const std::vector<T> &value() const;
  // Gradient accumulated by the last backward pass; empty when none reached.
  const std::vector<T> &grad() const;
  bool requires_grad() const;
  Tensor<T> tensor() const { return Tensor<T>(shape(), value()); }
  std::size_t size() const { return value().size(); }
  std::size_t dim(int axis) const {
    const auto &s = shape();
    return s[axis < 0 ? static_cast<int>(s.size()) + axis : axis];
  }
  std::size_t rank() const { return shape().size(); }

  Tape<T> *tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T> *tape_ = nullptr;
  int id_ = -1;
};

// Records operations in creation order (a topological order) and replays them
// in exact reverse during backward. A tape is single-threaded.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape &)>;

  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    Parameter<T> *param = nullptr;
    BackwardFn backward;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  DiffArray<T> constant(Tensor<T> t);
  // Free-standing leaf; its gradient stays on the node (used by gradient checks).
  DiffArray<T> leaf(Tensor<T> t, bool requires_grad);
  // Parameter leaf; gradients accumulate into p.grad when p.trainable.
  DiffArray<T> param(Parameter<T> &p);

  // d(loss)/d(leaf) for every leaf that requires grad. loss must hold one element.
  void backward(const DiffArray<T> &loss);

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  Node &node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node &node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  // Zero-initialised on first use.
  std::vector<T> &grad_buffer(int id);

  // Appends an op result. The backward function is kept only when some input
  // requires grad.
  DiffArray<T> push(Shape shape, std::vector<T> value, std::initializer_list<DiffArray<T>> inputs, BackwardFn fn);
  DiffArray<T> push(Shape shape, std::vector<T> value, std::span<const DiffArray<T>> inputs, BackwardFn fn);

 private:
  std::deque<Node> nodes_;
  bool grad_enabled_;
};

// ---- primitives -----------------------------------------------------------
// Broadcasting (add, sub, mul) follows numpy rules: dimensions are aligned
// from the right and must match or be 1.

template <class T> DiffArray<T> add(const DiffArray<T> &a, const DiffArray<T> &b);
template <class T> DiffArray<T> sub(const DiffArray<T> &a, const DiffArray<T> &b);
template <class T> DiffArray<T> mul(const DiffArray<T> &a, const DiffArray<T> &b);
template <class T> DiffArray<T> scale(const DiffArray<T> &a, T s);

// a[..., m, k] x b[k, n] (shared weight), or batched a[B..., m, k] x b[B..., k, n].
template <class T> DiffArray<T> matmul(const DiffArray<T> &a, const DiffArray<T> &b);
// Swaps the last two axes.
template <class T> DiffArray<T> transpose(const DiffArray<T> &a);
template <class T> DiffArray<T> reshape(const DiffArray<T> &a, Shape shape);
template <class T> DiffArray<T> permute(const DiffArray<T> &a, const std::vector<int> &perm);

template <class T> DiffArray<T> concat(std::span<const DiffArray<T>> parts, int axis);
template <class T> std::vector<DiffArray<T>> split(const DiffArray<T> &a, int axis, const std::vector<std::size_t> &sizes);
// Gathers entries along `axis`; indices may repeat.
template <class T> DiffArray<T> take(const DiffArray<T> &a, int axis, const std::vector<std::size_t> &indices);
template <class T> DiffArray<T> embedding_lookup(const DiffArray<T> &table, const std::vector<std::size_t> &indices);

template <class T> DiffArray<T> sum(const DiffArray<T> &a, int axis);
template <class T> DiffArray<T> mean(const DiffArray<T> &a, int axis);
template <class T> DiffArray<T> sum_all(const DiffArray<T> &a);
template <class T> DiffArray<T> mean_all(const DiffArray<T> &a);

template <class T> DiffArray<T> relu(const DiffArray<T> &a);
// Exact erf formulation.
template <class T> DiffArray<T> gelu(const DiffArray<T> &a);
template <class T> DiffArray<T> sigmoid(const DiffArray<T> &a);
template <class T> DiffArray<T> tanh(const DiffArray<T> &a);
template <class T> DiffArray<T> softmax(const DiffArray<T> &a);
// Normalises over the last axis, then gamma * x_hat + beta.
template <class T>
DiffArray<T> layer_norm(const DiffArray<T> &x, const DiffArray<T> &gamma, const DiffArray<T> &beta, T eps);
// Elementwise Huber with unit threshold: 0.5 d^2 if |d| < 1 else |d| - 0.5.
template <class T> DiffArray<T> smooth_l1(const DiffArray<T> &pred, const DiffArray<T> &target);

}  // namespace vaguide::diff
