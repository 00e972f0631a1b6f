// SPDX-License-Identifier: Apache-2.0
#include "tensor/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "common/error.hpp"

namespace dinolens::ad {

size_t numel(const Shape& shape) {
  size_t n = 1;
  for (size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
NodePtr<T> make_node(Shape shape, std::vector<T> values, const char* op,
                     std::initializer_list<const Tensor<T>*> inputs) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::make_shared<std::vector<T>>(std::move(values));
  node->op = op;
  for (const Tensor<T>* in : inputs) {
    if (in->requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const Tensor<T>* in : inputs) node->parents.push_back(in->node());
  }
  return node;
}

/// Gradient scratch of a parent, allocated on first use; null when the parent
/// does not take gradients.
template <class T>
T* work_of(const NodePtr<T>& node) {
  if (!node->requires_grad) return nullptr;
  if (node->work.empty()) node->work.assign(node->data->size(), T(0));
  return node->work.data();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

// C[m,n] += A[m,k] B[k,n]
template <class T>
void gemm_nn(size_t m, size_t k, size_t n, const T* A, const T* B, T* C) {
  for (size_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    const T* a = A + i * k;
    for (size_t p = 0; p < k; ++p) {
      const T av = a[p];
      const T* b = B + p * n;
      for (size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// dA[m,k] += dC[m,n] B[k,n]^T
template <class T>
void gemm_nt(size_t m, size_t n, size_t k, const T* dC, const T* B, T* dA) {
  for (size_t i = 0; i < m; ++i) {
    const T* g = dC + i * n;
    T* out = dA + i * k;
    for (size_t p = 0; p < k; ++p) {
      const T* b = B + p * n;
      T s = 0;
      for (size_t j = 0; j < n; ++j) s += g[j] * b[j];
      out[p] += s;
    }
  }
}

// dB[k,n] += A[m,k]^T dC[m,n]
template <class T>
void gemm_tn(size_t m, size_t k, size_t n, const T* A, const T* dC, T* dB) {
  for (size_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    const T* g = dC + i * n;
    for (size_t p = 0; p < k; ++p) {
      const T av = a[p];
      T* out = dB + p * n;
      for (size_t j = 0; j < n; ++j) out[j] += av * g[j];
    }
  }
}

}  // namespace

// ---- Tensor ------------------------------------------------------------------

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const size_t n = ad::numel(shape);
  return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (ad::numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " holds " + std::to_string(ad::numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::make_shared<std::vector<T>>(std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return (*node_->data)[0];
}

template <class T>
T Tensor<T>::at(std::initializer_list<size_t> index) const {
  if (index.size() != dim()) throw DimensionError("index rank mismatch");
  size_t flat = 0;
  size_t axis = 0;
  for (size_t i : index) {
    if (i >= shape()[axis]) throw DimensionError("index out of range");
    flat = flat * shape()[axis] + i;
    ++axis;
  }
  return (*node_->data)[flat];
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  auto node = std::make_shared<Node<T>>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::alias_leaf() const {
  auto node = std::make_shared<Node<T>>();
  node->shape = node_->shape;
  node->data = node_->data;
  node->requires_grad = true;
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  return from(shape(), *node_->data, requires_grad);
}

template <class T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!requires_grad()) throw ContractError("backward() on a tensor that does not require grad");

  // Post-order DFS over nodes that take gradients: the tape.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->work.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->work.empty()) node->backward(*node);
  }
  for (Node<T>* node : order) {
    if (node->grad.empty()) node->grad.assign(node->data->size(), T(0));
    if (!node->work.empty()) {
      for (size_t i = 0; i < node->grad.size(); ++i) node->grad[i] += node->work[i];
      node->work.clear();
      node->work.shrink_to_fit();
    }
  }
}

// ---- primitives --------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.dim() >= 2 && b.dim() >= 2, "matmul needs rank >= 2 operands, got " +
                                            shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const size_t m = a.shape()[a.dim() - 2];
  const size_t k = a.shape()[a.dim() - 1];
  const size_t kb = b.shape()[b.dim() - 2];
  const size_t n = b.shape()[b.dim() - 1];
  require(k == kb, "matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const bool shared_b = b.dim() == 2;
  if (!shared_b) {
    require(a.dim() == b.dim() && std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()),
            "matmul batch extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const size_t batch = a.numel() / (m * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<T> out(batch * m * n, T(0));
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (size_t bi = 0; bi < batch; ++bi) {
    gemm_nn(m, k, n, A + bi * m * k, shared_b ? B : B + bi * k * n, out.data() + bi * m * n);
  }
  auto node = make_node<T>(std::move(out_shape), std::move(out), "matmul", {&a, &b});
  if (node->requires_grad) {
    node->backward = [m, k, n, batch, shared_b](Node<T>& self) {
      const auto& pa = self.parents[0];
      const auto& pb = self.parents[1];
      const T* g = self.work.data();
      T* ga = work_of(pa);
      T* gb = work_of(pb);
      const T* A = pa->data->data();
      const T* B = pb->data->data();
      for (size_t bi = 0; bi < batch; ++bi) {
        const T* gc = g + bi * m * n;
        const T* Bb = shared_b ? B : B + bi * k * n;
        if (ga) gemm_nt(m, n, k, gc, Bb, ga + bi * m * k);
        if (gb) gemm_tn(m, k, n, A + bi * m * k, gc, shared_b ? gb : gb + bi * k * n);
      }
    };
  }
  return Tensor<T>(std::move(node));
}

namespace {

template <class T>
void check_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(is_suffix(a.shape(), b.shape()), std::string(op) + ": shape " + shape_str(b.shape()) +
                                               " does not broadcast onto " + shape_str(a.shape()));
}

}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(a, b, "add");
  const size_t n = a.numel();
  const size_t nb = b.numel();
  std::vector<T> out(n);
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (size_t i = 0; i < n; i += nb) {
    for (size_t j = 0; j < nb; ++j) out[i + j] = A[i + j] + B[j];
  }
  auto node = make_node<T>(a.shape(), std::move(out), "add", {&a, &b});
  if (node->requires_grad) {
    node->backward = [n, nb](Node<T>& self) {
      const T* g = self.work.data();
      if (T* ga = work_of(self.parents[0])) {
        for (size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (T* gb = work_of(self.parents[1])) {
        for (size_t i = 0; i < n; i += nb) {
          for (size_t j = 0; j < nb; ++j) gb[j] += g[i + j];
        }
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(a, b, "sub");
  const size_t n = a.numel();
  const size_t nb = b.numel();
  std::vector<T> out(n);
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (size_t i = 0; i < n; i += nb) {
    for (size_t j = 0; j < nb; ++j) out[i + j] = A[i + j] - B[j];
  }
  auto node = make_node<T>(a.shape(), std::move(out), "sub", {&a, &b});
  if (node->requires_grad) {
    node->backward = [n, nb](Node<T>& self) {
      const T* g = self.work.data();
      if (T* ga = work_of(self.parents[0])) {
        for (size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (T* gb = work_of(self.parents[1])) {
        for (size_t i = 0; i < n; i += nb) {
          for (size_t j = 0; j < nb; ++j) gb[j] -= g[i + j];
        }
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(a, b, "mul");
  const size_t n = a.numel();
  const size_t nb = b.numel();
  std::vector<T> out(n);
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (size_t i = 0; i < n; i += nb) {
    for (size_t j = 0; j < nb; ++j) out[i + j] = A[i + j] * B[j];
  }
  auto node = make_node<T>(a.shape(), std::move(out), "mul", {&a, &b});
  if (node->requires_grad) {
    node->backward = [n, nb](Node<T>& self) {
      const T* g = self.work.data();
      const T* A = self.parents[0]->data->data();
      const T* B = self.parents[1]->data->data();
      if (T* ga = work_of(self.parents[0])) {
        for (size_t i = 0; i < n; i += nb) {
          for (size_t j = 0; j < nb; ++j) ga[i + j] += g[i + j] * B[j];
        }
      }
      if (T* gb = work_of(self.parents[1])) {
        for (size_t i = 0; i < n; i += nb) {
          for (size_t j = 0; j < nb; ++j) gb[j] += g[i + j] * A[i + j];
        }
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v *= factor;
  auto node = make_node<T>(a.shape(), std::move(out), "scale", {&a});
  if (node->requires_grad) {
    node->backward = [factor](Node<T>& self) {
      T* ga = work_of(self.parents[0]);
      for (size_t i = 0; i < self.work.size(); ++i) ga[i] += factor * self.work[i];
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v += value;
  auto node = make_node<T>(a.shape(), std::move(out), "add_scalar", {&a});
  if (node->requires_grad) {
    node->backward = [](Node<T>& self) {
      T* ga = work_of(self.parents[0]);
      for (size_t i = 0; i < self.work.size(); ++i) ga[i] += self.work[i];
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  std::vector<T> out(x.numel());
  const T* X = x.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * X[i] * (T(1) + std::erf(X[i] * inv_sqrt2));
  auto node = make_node<T>(x.shape(), std::move(out), "gelu", {&x});
  if (node->requires_grad) {
    node->backward = [inv_sqrt2](Node<T>& self) {
      const T* X = self.parents[0]->data->data();
      T* gx = work_of(self.parents[0]);
      const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
      for (size_t i = 0; i < self.work.size(); ++i) {
        const T v = X[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += self.work[i] * (cdf + v * pdf);
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require(x.dim() >= 1 && x.numel() > 0, "softmax_rows on empty tensor");
  const size_t n = x.shape().back();
  const size_t rows = x.numel() / n;
  const T* X = x.data().data();
  std::vector<T> out(x.numel());
  for (size_t r = 0; r < rows; ++r) {
    const T* in = X + r * n;
    T* y = out.data() + r * n;
    T mx = in[0];
    for (size_t j = 0; j < n; ++j) {
      if (std::isnan(in[j])) throw NumericError("softmax_rows: NaN in row " + std::to_string(r));
      mx = std::max(mx, in[j]);
    }
    T total = 0;
    for (size_t j = 0; j < n; ++j) {
      y[j] = std::exp(in[j] - mx);
      total += y[j];
    }
    for (size_t j = 0; j < n; ++j) y[j] /= total;
  }
  auto node = make_node<T>(x.shape(), std::move(out), "softmax_rows", {&x});
  if (node->requires_grad) {
    node->backward = [n, rows](Node<T>& self) {
      const T* Y = self.data->data();
      const T* g = self.work.data();
      T* gx = work_of(self.parents[0]);
      for (size_t r = 0; r < rows; ++r) {
        const T* y = Y + r * n;
        const T* gr = g + r * n;
        T dot = 0;
        for (size_t j = 0; j < n; ++j) dot += gr[j] * y[j];
        for (size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (gr[j] - dot);
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require(x.dim() >= 1 && x.shape().back() >= 1, "layernorm on empty rows");
  const size_t d = x.shape().back();
  require(gain.numel() == d && bias.numel() == d,
          "layernorm affine size " + std::to_string(gain.numel()) + " does not match rows of " +
              std::to_string(d));
  const size_t rows = x.numel() / d;
  const T* X = x.data().data();
  const T* G = gain.data().data();
  const T* B = bias.data().data();
  std::vector<T> out(x.numel());
  // Normalized rows and inverse deviations are kept for the backward pass.
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (size_t r = 0; r < rows; ++r) {
    const T* in = X + r * d;
    T mu = 0;
    for (size_t j = 0; j < d; ++j) mu += in[j];
    mu /= T(d);
    T var = 0;
    for (size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (size_t j = 0; j < d; ++j) {
      const T h = (in[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * G[j] + B[j];
    }
  }
  auto node = make_node<T>(x.shape(), std::move(out), "layernorm", {&x, &gain, &bias});
  if (node->requires_grad) {
    node->backward = [d, rows, xhat, inv_std](Node<T>& self) {
      const T* g = self.work.data();
      const T* G = self.parents[1]->data->data();
      T* gx = work_of(self.parents[0]);
      T* gg = work_of(self.parents[1]);
      T* gb = work_of(self.parents[2]);
      const T* H = xhat->data();
      for (size_t r = 0; r < rows; ++r) {
        const T* gr = g + r * d;
        const T* h = H + r * d;
        if (gg || gb) {
          for (size_t j = 0; j < d; ++j) {
            if (gg) gg[j] += gr[j] * h[j];
            if (gb) gb[j] += gr[j];
          }
        }
        if (gx) {
          T mean_dh = 0;
          T mean_dh_h = 0;
          for (size_t j = 0; j < d; ++j) {
            const T dh = gr[j] * G[j];
            mean_dh += dh;
            mean_dh_h += dh * h[j];
          }
          mean_dh /= T(d);
          mean_dh_h /= T(d);
          const T is = (*inv_std)[r];
          for (size_t j = 0; j < d; ++j) {
            const T dh = gr[j] * G[j];
            gx[r * d + j] += is * (dh - mean_dh - h[j] * mean_dh_h);
          }
        }
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(ad::numel(shape) == x.numel(),
          "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  std::vector<T> out(x.data().begin(), x.data().end());
  auto node = make_node<T>(std::move(shape), std::move(out), "reshape", {&x});
  if (node->requires_grad) {
    node->backward = [](Node<T>& self) {
      T* gx = work_of(self.parents[0]);
      for (size_t i = 0; i < self.work.size(); ++i) gx[i] += self.work[i];
    };
  }
  return Tensor<T>(std::move(node));
}

namespace {

/// For each output flat index, the input flat index under `axes`.
std::vector<size_t> permutation_map(const Shape& in_shape, const std::vector<size_t>& axes) {
  const size_t rank = in_shape.size();
  std::vector<size_t> in_strides(rank, 1);
  for (size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<size_t> strides(rank);
  for (size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  const size_t total = ad::numel(in_shape);
  std::vector<size_t> map(total);
  std::vector<size_t> counter(rank, 0);
  size_t src = 0;
  for (size_t o = 0; o < total; ++o) {
    map[o] = src;
    for (size_t ax = rank; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        src += strides[ax];
        break;
      }
      src -= strides[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
  return map;
}

}  // namespace

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<size_t>& axes) {
  const size_t rank = x.dim();
  require(axes.size() == rank, "permute: axis list has wrong length");
  std::vector<bool> used(rank, false);
  for (size_t a : axes) {
    require(a < rank && !used[a], "permute: axes are not a permutation");
    used[a] = true;
  }
  Shape out_shape(rank);
  for (size_t i = 0; i < rank; ++i) out_shape[i] = x.shape()[axes[i]];
  auto map = std::make_shared<std::vector<size_t>>(permutation_map(x.shape(), axes));
  std::vector<T> out(x.numel());
  const T* X = x.data().data();
  for (size_t o = 0; o < out.size(); ++o) out[o] = X[(*map)[o]];
  auto node = make_node<T>(std::move(out_shape), std::move(out), "permute", {&x});
  if (node->requires_grad) {
    node->backward = [map](Node<T>& self) {
      T* gx = work_of(self.parents[0]);
      for (size_t o = 0; o < self.work.size(); ++o) gx[(*map)[o]] += self.work[o];
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  require(x.dim() >= 2, "transpose needs rank >= 2");
  std::vector<size_t> axes(x.dim());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, size_t begin, size_t end) {
  require(x.dim() >= 1 && begin <= end && end <= x.shape()[0],
          "slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
              shape_str(x.shape()));
  const size_t row = x.numel() / x.shape()[0];
  Shape out_shape = x.shape();
  out_shape[0] = end - begin;
  std::vector<T> out(x.data().begin() + begin * row, x.data().begin() + end * row);
  auto node = make_node<T>(std::move(out_shape), std::move(out), "slice_rows", {&x});
  if (node->requires_grad) {
    const size_t offset = begin * row;
    node->backward = [offset](Node<T>& self) {
      T* gx = work_of(self.parents[0]);
      for (size_t i = 0; i < self.work.size(); ++i) gx[offset + i] += self.work[i];
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_rows of nothing");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  size_t rows = 0;
  bool requires_grad = false;
  std::vector<T> out;
  for (const auto& p : parts) {
    require(p.dim() == tail.size() + 1 && std::equal(tail.begin(), tail.end(), p.shape().begin() + 1),
            "concat_rows: trailing shapes differ");
    rows += p.shape()[0];
    out.insert(out.end(), p.data().begin(), p.data().end());
    requires_grad = requires_grad || p.requires_grad();
  }
  Shape out_shape{rows};
  out_shape.insert(out_shape.end(), tail.begin(), tail.end());
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(out_shape);
  node->data = std::make_shared<std::vector<T>>(std::move(out));
  node->op = "concat_rows";
  node->requires_grad = requires_grad;
  if (requires_grad) {
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward = [](Node<T>& self) {
      size_t offset = 0;
      for (const auto& parent : self.parents) {
        const size_t len = parent->data->size();
        if (T* gp = work_of(parent)) {
          for (size_t i = 0; i < len; ++i) gp[i] += self.work[offset + i];
        }
        offset += len;
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  auto node = make_node<T>({1}, {total}, "sum", {&x});
  if (node->requires_grad) {
    node->backward = [](Node<T>& self) {
      T* gx = work_of(self.parents[0]);
      const T g = self.work[0];
      for (size_t i = 0; i < self.parents[0]->data->size(); ++i) gx[i] += g;
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  require(x.numel() > 0, "mean of empty tensor");
  return scale(sum(x), T(1) / T(x.numel()));
}

template <class T>
Tensor<T> row_cosine(const Tensor<T>& a, const Tensor<T>& target, T eps, size_t* zero_target_rows) {
  require(a.shape() == target.shape() && a.dim() >= 1,
          "row_cosine shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(target.shape()));
  const size_t c = a.shape().back();
  const size_t rows = a.numel() / c;
  const T* A = a.data().data();
  const T* B = target.data().data();
  std::vector<T> out(rows);
  auto norms = std::make_shared<std::vector<std::pair<T, T>>>(rows);
  size_t zero_rows = 0;
  for (size_t r = 0; r < rows; ++r) {
    T dot = 0, na = 0, nb = 0;
    for (size_t j = 0; j < c; ++j) {
      dot += A[r * c + j] * B[r * c + j];
      na += A[r * c + j] * A[r * c + j];
      nb += B[r * c + j] * B[r * c + j];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    (*norms)[r] = {na, nb};
    if (nb == T(0)) {
      ++zero_rows;
      out[r] = 0;
    } else {
      out[r] = dot / (na * nb + eps);
    }
  }
  if (zero_target_rows) *zero_target_rows = zero_rows;
  auto node = make_node<T>({rows}, std::move(out), "row_cosine", {&a, &target});
  if (node->requires_grad) {
    node->backward = [c, rows, eps, norms](Node<T>& self) {
      T* ga = work_of(self.parents[0]);
      if (!ga) return;
      const T* A = self.parents[0]->data->data();
      const T* B = self.parents[1]->data->data();
      for (size_t r = 0; r < rows; ++r) {
        const auto [na, nb] = (*norms)[r];
        if (nb == T(0)) continue;
        T dot = 0;
        for (size_t j = 0; j < c; ++j) dot += A[r * c + j] * B[r * c + j];
        const T denom = na * nb + eps;
        const T g = self.work[r];
        const T coef_b = g / denom;
        const T coef_a = na > T(0) ? -g * dot * nb / (na * denom * denom) : T(0);
        for (size_t j = 0; j < c; ++j) ga[r * c + j] += coef_b * B[r * c + j] + coef_a * A[r * c + j];
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> head_bias(const Tensor<T>& slopes, const Tensor<T>& dist) {
  require(slopes.dim() == 1 && dist.dim() == 2 && dist.shape()[0] == dist.shape()[1],
          "head_bias expects [h] slopes and a square distance matrix");
  const size_t h = slopes.numel();
  const size_t nn = dist.numel();
  const T* S = slopes.data().data();
  const T* D = dist.data().data();
  std::vector<T> out(h * nn);
  for (size_t k = 0; k < h; ++k) {
    for (size_t i = 0; i < nn; ++i) out[k * nn + i] = -S[k] * D[i];
  }
  auto node = make_node<T>({h, dist.shape()[0], dist.shape()[1]}, std::move(out), "head_bias",
                           {&slopes, &dist});
  if (node->requires_grad) {
    node->backward = [h, nn](Node<T>& self) {
      const T* g = self.work.data();
      const T* S = self.parents[0]->data->data();
      const T* D = self.parents[1]->data->data();
      if (T* gs = work_of(self.parents[0])) {
        for (size_t k = 0; k < h; ++k) {
          T acc = 0;
          for (size_t i = 0; i < nn; ++i) acc += g[k * nn + i] * D[i];
          gs[k] -= acc;
        }
      }
      if (T* gd = work_of(self.parents[1])) {
        for (size_t k = 0; k < h; ++k) {
          for (size_t i = 0; i < nn; ++i) gd[i] -= g[k * nn + i] * S[k];
        }
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <class T>
Tensor<T> rotate_pairs(const Tensor<T>& x, const Tensor<T>& cos_table, const Tensor<T>& sin_table) {
  require(x.dim() >= 2, "rotate_pairs needs [.., tokens, dim]");
  const size_t d = x.shape().back();
  const size_t t = x.shape()[x.dim() - 2];
  require(d % 2 == 0, "rotate_pairs needs an even last axis");
  require(cos_table.numel() == t * (d / 2) && sin_table.numel() == t * (d / 2),
          "rotate_pairs tables must be [tokens, dim/2]");
  const size_t half = d / 2;
  const size_t batch = x.numel() / (t * d);
  const T* X = x.data().data();
  const T* C = cos_table.data().data();
  const T* S = sin_table.data().data();
  std::vector<T> out(x.numel());
  for (size_t b = 0; b < batch; ++b) {
    for (size_t i = 0; i < t; ++i) {
      const T* in = X + (b * t + i) * d;
      T* y = out.data() + (b * t + i) * d;
      for (size_t p = 0; p < half; ++p) {
        const T c = C[i * half + p];
        const T s = S[i * half + p];
        y[2 * p] = in[2 * p] * c - in[2 * p + 1] * s;
        y[2 * p + 1] = in[2 * p] * s + in[2 * p + 1] * c;
      }
    }
  }
  auto node = make_node<T>(x.shape(), std::move(out), "rotate_pairs", {&x, &cos_table, &sin_table});
  if (node->requires_grad) {
    node->backward = [batch, t, d, half](Node<T>& self) {
      T* gx = work_of(self.parents[0]);
      if (!gx) return;
      const T* C = self.parents[1]->data->data();
      const T* S = self.parents[2]->data->data();
      const T* g = self.work.data();
      for (size_t b = 0; b < batch; ++b) {
        for (size_t i = 0; i < t; ++i) {
          const T* gr = g + (b * t + i) * d;
          T* out = gx + (b * t + i) * d;
          for (size_t p = 0; p < half; ++p) {
            const T c = C[i * half + p];
            const T s = S[i * half + p];
            out[2 * p] += gr[2 * p] * c + gr[2 * p + 1] * s;
            out[2 * p + 1] += -gr[2 * p] * s + gr[2 * p + 1] * c;
          }
        }
      }
    };
  }
  return Tensor<T>(std::move(node));
}

// ---- AdamW -------------------------------------------------------------------

template <class T>
AdamW<T>::AdamW(std::vector<Tensor<T>> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].numel(), 0.0);
    v_[i].assign(params_[i].numel(), 0.0);
  }
}

template <class T>
void AdamW<T>::apply(size_t index, std::span<const T> grad) {
  auto p = params_[index].mutable_data();
  auto& m = m_[index];
  auto& v = v_[index];
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double decay = 1.0 - options_.lr * options_.weight_decay;
  for (size_t i = 0; i < p.size(); ++i) {
    const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
    m[i] = b1 * m[i] + (1.0 - b1) * g;
    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
    const double mhat = m[i] / correction1;
    const double vhat = v[i] / correction2;
    const double updated = static_cast<double>(p[i]) * decay - options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
    p[i] = static_cast<T>(updated);
  }
}

template <class T>
void AdamW<T>::step() {
  ++steps_;
  for (size_t i = 0; i < params_.size(); ++i) {
    const auto& param = params_[i];
    if (param.has_grad()) {
      apply(i, param.grad());
    } else {
      apply(i, {});
    }
  }
}

template <class T>
void AdamW<T>::step(std::span<const std::vector<T>> grads) {
  if (grads.size() != params_.size()) throw ContractError("AdamW::step: one gradient per parameter");
  ++steps_;
  for (size_t i = 0; i < params_.size(); ++i) {
    if (!grads[i].empty() && grads[i].size() != params_[i].numel()) {
      throw DimensionError("AdamW::step: gradient size mismatch for parameter " + std::to_string(i));
    }
    apply(i, grads[i]);
  }
}

template <class T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

// ---- instantiation -------------------------------------------------------------

#define DINOLENS_INSTANTIATE(T)                                                                  \
  template class Tensor<T>;                                                                      \
  template class AdamW<T>;                                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                            \
  template Tensor<T> gelu(const Tensor<T>&);                                                     \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                             \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<size_t>&);                      \
  template Tensor<T> transpose(const Tensor<T>&);                                                \
  template Tensor<T> slice_rows(const Tensor<T>&, size_t, size_t);                               \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> row_cosine(const Tensor<T>&, const Tensor<T>&, T, size_t*);                 \
  template Tensor<T> head_bias(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> rotate_pairs(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

DINOLENS_INSTANTIATE(float)
DINOLENS_INSTANTIATE(double)

#undef DINOLENS_INSTANTIATE

}  // namespace dinolens::ad
