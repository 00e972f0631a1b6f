// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a handle onto a graph node. Operations on tensors that require
// gradients record their inputs and a backward rule; `backward()` orders the
// reachable nodes topologically (the tape) and replays it in reverse. Leaves
// accumulate gradients across calls until `zero_grad()`.
//
// Kernels are deterministic: every reduction runs sequentially in index order.
// Broadcasting is limited to leading batch dimensions (an operand whose shape
// is a suffix of the other's).

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dinolens::ad {

using Shape = std::vector<size_t>;

size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::vector<T> grad;  // persistent accumulator; empty until first backward
  std::vector<T> work;  // gradient flowing through this node during one backward pass
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  size_t dim() const { return node_->shape.size(); }
  size_t size(size_t axis) const { return node_->shape.at(axis); }
  size_t numel() const { return node_->data->size(); }

  std::span<const T> data() const { return {node_->data->data(), node_->data->size()}; }
  /// Writable view of the values. Only meaningful for leaves (parameters,
  /// inputs); mutating an interior node invalidates its recorded graph.
  std::span<T> mutable_data() { return {node_->data->data(), node_->data->size()}; }
  T item() const;
  T at(std::initializer_list<size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->parents.empty(); }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return {node_->grad.data(), node_->grad.size()}; }
  std::span<T> mutable_grad() { return {node_->grad.data(), node_->grad.size()}; }
  void zero_grad() { node_->grad.clear(); }

  /// Shares the values, drops the graph; never requires grad.
  Tensor detach() const;
  /// New leaf sharing the value buffer but with its own gradient. Workers use
  /// aliases of shared parameters so each owns its tape and accumulators.
  Tensor alias_leaf() const;
  /// Deep copy as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  /// Reverse pass from a scalar. Repeated calls accumulate into leaf grads.
  void backward() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// ---- primitives --------------------------------------------------------------

/// [.., m, k] x [.., k, n] -> [.., m, n]. `b` may also be a plain [k, n]
/// matrix shared across the leading batch of `a`.
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise; `b` may have a shape equal to a suffix of `a`'s shape.
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <class T> Tensor<T> add_scalar(const Tensor<T>& a, T value);

template <class T> Tensor<T> gelu(const Tensor<T>& x);
/// Softmax over the last axis, max-subtracted. NaN input raises NumericError.
template <class T> Tensor<T> softmax_rows(const Tensor<T>& x);
/// Normalizes over the last axis: (x - mean) / sqrt(var + eps) * gain + bias.
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-6));

template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// General axis permutation (copies).
template <class T> Tensor<T> permute(const Tensor<T>& x, const std::vector<size_t>& axes);
/// Swaps the last two axes.
template <class T> Tensor<T> transpose(const Tensor<T>& x);
/// Rows [begin, end) along axis 0.
template <class T> Tensor<T> slice_rows(const Tensor<T>& x, size_t begin, size_t end);
/// Concatenation along axis 0.
template <class T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);

template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x);

/// Per-row cosine similarity of `a` [n, c] against a constant `target` [n, c]:
/// a.t / (|a||t| + eps). Rows whose target norm is zero yield 0; their count
/// is written to `zero_target_rows` when given.
template <class T>
Tensor<T> row_cosine(const Tensor<T>& a, const Tensor<T>& target, T eps = T(1e-8),
                     size_t* zero_target_rows = nullptr);

/// [h] slopes and a constant [n, n] distance matrix -> [h, n, n] offsets
/// -slope_h * dist.
template <class T> Tensor<T> head_bias(const Tensor<T>& slopes, const Tensor<T>& dist);

/// Rotates adjacent pairs (2p, 2p+1) of the last axis of x [.., t, d] by the
/// per-(token, pair) angle whose cosine and sine are given as [t, d/2].
template <class T>
Tensor<T> rotate_pairs(const Tensor<T>& x, const Tensor<T>& cos_table, const Tensor<T>& sin_table);

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

/// Converts values between precisions as a new leaf.
template <class To, class From>
Tensor<To> cast(const Tensor<From>& x, bool requires_grad = false) {
  std::vector<To> values(x.numel());
  auto src = x.data();
  for (size_t i = 0; i < values.size(); ++i) values[i] = static_cast<To>(src[i]);
  return Tensor<To>::from(x.shape(), std::move(values), requires_grad);
}

// ---- optimizer ---------------------------------------------------------------

struct AdamWOptions {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Decoupled weight decay Adam. Moments are kept in fp64 regardless of T.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, AdamWOptions options);

  /// One update from each parameter's own accumulated grad (absent = zero).
  void step();
  /// One update from explicit gradients, one buffer per parameter.
  void step(std::span<const std::vector<T>> grads);
  void zero_grad();

  void set_lr(double lr) { options_.lr = lr; }
  const AdamWOptions& options() const { return options_; }
  long steps() const { return steps_; }

 private:
  void apply(size_t index, std::span<const T> grad);

  std::vector<Tensor<T>> params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long steps_ = 0;
};

}  // namespace dinolens::ad
