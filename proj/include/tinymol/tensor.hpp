#pragma once

// Minimal dense reverse-mode tensor core. Row-major storage, value-semantic
// Tensor handles over shared graph nodes, one computation tape per thread.
// Gradients accumulate additively into leaf buffers; callers zero them
// between steps. Double backward is not supported.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "tinymol/errors.hpp"
#include "tinymol/rng.hpp"

namespace tinymol::diff {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string format_shape(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int d = static_cast<int>(s.size()) - 2; d >= 0; --d) st[d] = st[d + 1] * s[d + 1];
  return st;
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw Error(ErrorCode::shape_mismatch, op + ": " + format_shape(a) + " vs " + format_shape(b));
}

// Every differentiable primitive, by canonical name. The gradient-check
// suite is required to cover this list exactly.
inline const std::vector<std::string>& all_op_names() {
  static const std::vector<std::string> names = {
      "add",        "sub",         "mul",        "div",        "neg",
      "exp",        "abs",         "gelu",       "sigmoid",    "add_scalar",
      "mul_scalar", "matmul",      "bmm",        "permute",    "reshape",
      "concat",     "softmax",     "layer_norm", "embedding_lookup",
      "cross_entropy", "l1_loss",  "reduce_sum", "reduce_mean",
      "tri_contract", "pairwise_distances"};
  return names;
}

namespace detail {

inline void check_known_op(const char* name) {
  static const std::unordered_set<std::string> known(all_op_names().begin(),
                                                     all_op_names().end());
  assert(known.count(name) && "primitive missing from all_op_names()");
  (void)name;
}

}  // namespace detail

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T value) {
    Tensor t;
    t.n_ = std::make_shared<Node<T>>();
    t.n_->shape = std::move(shape);
    t.n_->values.assign(tinymol::diff::numel(t.n_->shape), value);
    return t;
  }

  static Tensor scalar(T value) { return full(Shape{}, value); }

  static Tensor from_data(Shape shape, std::vector<T> values) {
    if (static_cast<int64_t>(values.size()) != tinymol::diff::numel(shape))
      throw Error(ErrorCode::shape_mismatch,
                  "from_data: " + std::to_string(values.size()) + " values for shape " +
                      format_shape(shape));
    Tensor t;
    t.n_ = std::make_shared<Node<T>>();
    t.n_->shape = std::move(shape);
    t.n_->values = std::move(values);
    return t;
  }

  static Tensor randn(Shape shape, std::mt19937_64& gen, T stddev = T(1)) {
    Tensor t = zeros(std::move(shape));
    for (T& v : t.values()) v = static_cast<T>(tinymol::rng::normal(gen)) * stddev;
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return static_cast<int64_t>(n_->values.size()); }
  int64_t dim(int d) const { return n_->shape[d]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }

  std::vector<T>& values() { return n_->values; }
  const std::vector<T>& values() const { return n_->values; }

  T item() const {
    if (numel() != 1) throw Error(ErrorCode::not_scalar, "item() on " + format_shape(shape()));
    return n_->values[0];
  }

  Tensor& set_requires_grad(bool flag = true) {
    n_->requires_grad = flag;
    if (flag) n_->ensure_grad();
    return *this;
  }
  bool requires_grad() const { return n_->requires_grad; }

  std::vector<T>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  const std::vector<T>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }

  void zero_grad() { n_->grad.assign(n_->values.size(), T(0)); }

  const char* op() const { return n_->op; }

  // Reverse-mode sweep from a scalar. Populates grad on every reachable
  // tensor with requires_grad; a graph is meant to be swept once.
  void backward() const {
    if (numel() != 1)
      throw Error(ErrorCode::not_scalar, "backward() on " + format_shape(shape()));
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    visited.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* in = node->inputs[next++].get();
        if (in->requires_grad && visited.insert(in).second) stack.emplace_back(in, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->ensure_grad();
    n_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }

  std::shared_ptr<Node<T>> node() const { return n_; }

 private:
  template <typename U>
  friend Tensor<U> make_op(const char*, Shape, std::vector<U>, std::vector<Tensor<U>>,
                           std::function<void(Node<U>&)>);
  std::shared_ptr<Node<T>> n_;
};

// A named trainable tensor.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> values,
                  std::vector<Tensor<T>> inputs, std::function<void(Node<T>&)> backward_fn) {
  detail::check_known_op(name);
  Tensor<T> out;
  out.n_ = std::make_shared<Node<T>>();
  out.n_->shape = std::move(shape);
  out.n_->values = std::move(values);
  out.n_->op = name;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    out.n_->requires_grad = true;
    out.n_->inputs.reserve(inputs.size());
    for (const auto& in : inputs) out.n_->inputs.push_back(in.node());
    out.n_->backward_fn = std::move(backward_fn);
  }
  return out;
}

namespace detail {

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (size_t i = 0; i < nd; ++i) {
    const int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) shape_error(op, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides for reading `in` as if broadcast to `out` (0 on broadcast dims).
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  const auto real = row_major_strides(in);
  const size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i)
    if (in[i] != 1) st[off + i] = real[i];
  return st;
}

// Odometer walk over `out` in row-major order, yielding the flat offsets
// into two broadcast operands.
template <typename F>
void for_each_broadcast2(const Shape& out, const std::vector<int64_t>& sa,
                         const std::vector<int64_t>& sb, F&& f) {
  const int64_t total = numel(out);
  const int nd = static_cast<int>(out.size());
  std::vector<int64_t> idx(nd, 0);
  int64_t ai = 0, bi = 0;
  for (int64_t o = 0; o < total; ++o) {
    f(o, ai, bi);
    for (int d = nd - 1; d >= 0; --d) {
      ++idx[d];
      ai += sa[d];
      bi += sb[d];
      if (idx[d] < out[d]) break;
      ai -= sa[d] * out[d];
      bi -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Broadcasting elementwise arithmetic

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary_ew(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA dfda,
                    DB dfdb) {
  const Shape out_shape = detail::broadcast_shape(name, a.shape(), b.shape());
  const auto sa = detail::broadcast_strides(a.shape(), out_shape);
  const auto sb = detail::broadcast_strides(b.shape(), out_shape);
  std::vector<T> vals(numel(out_shape));
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::for_each_broadcast2(out_shape, sa, sb,
                              [&](int64_t o, int64_t ai, int64_t bi) { vals[o] = fwd(av[ai], bv[bi]); });
  return make_op<T>(name, out_shape, std::move(vals), {a, b},
                    [out_shape, sa, sb, dfda, dfdb](Node<T>& node) {
                      Node<T>* na = node.inputs[0].get();
                      Node<T>* nb = node.inputs[1].get();
                      if (na->requires_grad) na->ensure_grad();
                      if (nb->requires_grad) nb->ensure_grad();
                      detail::for_each_broadcast2(
                          out_shape, sa, sb, [&](int64_t o, int64_t ai, int64_t bi) {
                            const T g = node.grad[o];
                            if (na->requires_grad)
                              na->grad[ai] += g * dfda(na->values[ai], nb->values[bi]);
                            if (nb->requires_grad)
                              nb->grad[bi] += g * dfdb(na->values[ai], nb->values[bi]);
                          });
                    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_ew<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// Elementwise unary

template <typename T, typename Fwd, typename Dfdx>
Tensor<T> unary_ew(const char* name, const Tensor<T>& a, Fwd fwd, Dfdx dfdx) {
  std::vector<T> vals(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) vals[i] = fwd(a.values()[i]);
  return make_op<T>(name, a.shape(), std::move(vals), {a}, [dfdx](Node<T>& node) {
    Node<T>* in = node.inputs[0].get();
    in->ensure_grad();
    for (size_t i = 0; i < node.grad.size(); ++i)
      in->grad[i] += node.grad[i] * dfdx(in->values[i], node.values[i]);
  });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_ew<T>(
      "neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_ew<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary_ew<T>(
      "abs", a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865476;
  constexpr double inv_sqrt2pi = 0.3989422804014327;
  return unary_ew<T>(
      "gelu", a,
      [](T x) {
        return static_cast<T>(0.5 * static_cast<double>(x) *
                              (1.0 + std::erf(static_cast<double>(x) * inv_sqrt2)));
      },
      [](T x, T) {
        const double xd = static_cast<double>(x);
        const double cdf = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
        return static_cast<T>(cdf + xd * pdf);
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_ew<T>(
      "sigmoid", a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> vals(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) vals[i] = a.values()[i] + c;
  return make_op<T>("add_scalar", a.shape(), std::move(vals), {a}, [](Node<T>& node) {
    Node<T>* in = node.inputs[0].get();
    in->ensure_grad();
    for (size_t i = 0; i < node.grad.size(); ++i) in->grad[i] += node.grad[i];
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  std::vector<T> vals(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) vals[i] = a.values()[i] * c;
  return make_op<T>("mul_scalar", a.shape(), std::move(vals), {a}, [c](Node<T>& node) {
    Node<T>* in = node.inputs[0].get();
    in->ensure_grad();
    for (size_t i = 0; i < node.grad.size(); ++i) in->grad[i] += node.grad[i] * c;
  });
}

// ---------------------------------------------------------------------------
// Matrix products

namespace detail {

template <typename T>
void matmul_slice(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t kk = 0; kk < k; ++kk) {
      const T aik = a[i * k + kk];
      if (aik == T(0)) continue;
      const T* brow = b + kk * n;
      T* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
}

// dA += G B^T, dB += A^T G
template <typename T>
void matmul_slice_backward(const T* a, const T* b, const T* g, T* da, T* db, int64_t m, int64_t k,
                           int64_t n) {
  if (da)
    for (int64_t i = 0; i < m; ++i)
      for (int64_t kk = 0; kk < k; ++kk) {
        T acc = T(0);
        const T* grow = g + i * n;
        const T* brow = b + kk * n;
        for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
        da[i * k + kk] += acc;
      }
  if (db)
    for (int64_t kk = 0; kk < k; ++kk)
      for (int64_t i = 0; i < m; ++i) {
        const T aik = a[i * k + kk];
        if (aik == T(0)) continue;
        const T* grow = g + i * n;
        T* dbrow = db + kk * n;
        for (int64_t j = 0; j < n; ++j) dbrow[j] += aik * grow[j];
      }
}

}  // namespace detail

// Batched matrix product over identical leading dims: [...,m,k] x [...,k,n].
// `matmul` is the 2-D case.
template <typename T>
Tensor<T> bmm_named(const char* name, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() != a.ndim()) shape_error(name, a.shape(), b.shape());
  const int nd = a.ndim();
  for (int d = 0; d + 2 < nd; ++d)
    if (a.shape()[d] != b.shape()[d]) shape_error(name, a.shape(), b.shape());
  const int64_t m = a.shape()[nd - 2], k = a.shape()[nd - 1], n = b.shape()[nd - 1];
  if (b.shape()[nd - 2] != k) shape_error(name, a.shape(), b.shape());

  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  int64_t batch = numel(out_shape);
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<T> vals(numel(out_shape), T(0));
  for (int64_t bi = 0; bi < batch; ++bi)
    detail::matmul_slice(a.values().data() + bi * m * k, b.values().data() + bi * k * n,
                         vals.data() + bi * m * n, m, k, n);

  return make_op<T>(name, out_shape, std::move(vals), {a, b}, [batch, m, k, n](Node<T>& node) {
    Node<T>* na = node.inputs[0].get();
    Node<T>* nb = node.inputs[1].get();
    if (na->requires_grad) na->ensure_grad();
    if (nb->requires_grad) nb->ensure_grad();
    for (int64_t bi = 0; bi < batch; ++bi)
      detail::matmul_slice_backward(na->values.data() + bi * m * k,
                                    nb->values.data() + bi * k * n, node.grad.data() + bi * m * n,
                                    na->requires_grad ? na->grad.data() + bi * m * k : nullptr,
                                    nb->requires_grad ? nb->grad.data() + bi * k * n : nullptr, m,
                                    k, n);
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2) shape_error("matmul", a.shape(), b.shape());
  return bmm_named("matmul", a, b);
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  return bmm_named("bmm", a, b);
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  if (static_cast<int>(perm.size()) != a.ndim())
    throw Error(ErrorCode::shape_mismatch,
                "permute: " + std::to_string(perm.size()) + " axes for " + format_shape(a.shape()));
  Shape out_shape(perm.size());
  for (size_t d = 0; d < perm.size(); ++d) out_shape[d] = a.shape()[perm[d]];

  const auto in_strides = row_major_strides(a.shape());
  std::vector<int64_t> walk(perm.size());
  for (size_t d = 0; d < perm.size(); ++d) walk[d] = in_strides[perm[d]];

  std::vector<T> vals(a.numel());
  const std::vector<int64_t> zero(perm.size(), 0);
  detail::for_each_broadcast2(out_shape, walk, zero,
                              [&](int64_t o, int64_t ii, int64_t) { vals[o] = a.values()[ii]; });
  return make_op<T>("permute", out_shape, std::move(vals), {a}, [out_shape, walk, zero](Node<T>& node) {
    Node<T>* in = node.inputs[0].get();
    in->ensure_grad();
    detail::for_each_broadcast2(out_shape, walk, zero, [&](int64_t o, int64_t ii, int64_t) {
      in->grad[ii] += node.grad[o];
    });
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int d0, int d1) {
  std::vector<int> perm(a.ndim());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[d0], perm[d1]);
  return permute(a, perm);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  std::vector<T> vals = a.values();
  return make_op<T>("reshape", std::move(shape), std::move(vals), {a}, [](Node<T>& node) {
    Node<T>* in = node.inputs[0].get();
    in->ensure_grad();
    for (size_t i = 0; i < node.grad.size(); ++i) in->grad[i] += node.grad[i];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw Error(ErrorCode::shape_mismatch, "concat: no inputs");
  const int nd = parts[0].ndim();
  Shape out_shape = parts[0].shape();
  for (size_t p = 1; p < parts.size(); ++p) {
    if (parts[p].ndim() != nd) shape_error("concat", parts[0].shape(), parts[p].shape());
    for (int d = 0; d < nd; ++d)
      if (d != axis && parts[p].shape()[d] != out_shape[d])
        shape_error("concat", parts[0].shape(), parts[p].shape());
    out_shape[axis] += parts[p].shape()[axis];
  }

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[d];
  for (int d = axis + 1; d < nd; ++d) inner *= out_shape[d];
  const int64_t out_block = out_shape[axis] * inner;

  std::vector<T> vals(numel(out_shape));
  std::vector<int64_t> axis_sizes;
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t block = p.shape()[axis] * inner;
    for (int64_t r = 0; r < outer; ++r)
      std::copy_n(p.values().data() + r * block, block, vals.data() + r * out_block + off);
    axis_sizes.push_back(p.shape()[axis]);
    off += block;
  }

  return make_op<T>("concat", out_shape, std::move(vals), parts,
                    [outer, inner, out_block, axis_sizes](Node<T>& node) {
                      int64_t off = 0;
                      for (size_t p = 0; p < node.inputs.size(); ++p) {
                        Node<T>* in = node.inputs[p].get();
                        const int64_t block = axis_sizes[p] * inner;
                        if (in->requires_grad) {
                          in->ensure_grad();
                          for (int64_t r = 0; r < outer; ++r)
                            for (int64_t i = 0; i < block; ++i)
                              in->grad[r * block + i] += node.grad[r * out_block + off + i];
                        }
                        off += block;
                      }
                    });
}

// ---------------------------------------------------------------------------
// Normalizations

// Softmax over the last axis, computed with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.ndim() < 1) throw Error(ErrorCode::shape_mismatch, "softmax: needs at least 1 axis");
  const int64_t width = a.shape().back();
  const int64_t rows = a.numel() / width;
  std::vector<T> vals(a.numel());
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = a.values().data() + r * width;
    T* y = vals.data() + r * width;
    T mx = x[0];
    for (int64_t i = 1; i < width; ++i) mx = std::max(mx, x[i]);
    T z = T(0);
    for (int64_t i = 0; i < width; ++i) {
      y[i] = std::exp(x[i] - mx);
      z += y[i];
    }
    for (int64_t i = 0; i < width; ++i) y[i] /= z;
  }
  return make_op<T>("softmax", a.shape(), std::move(vals), {a}, [rows, width](Node<T>& node) {
    Node<T>* in = node.inputs[0].get();
    in->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = node.values.data() + r * width;
      const T* g = node.grad.data() + r * width;
      T dot = T(0);
      for (int64_t i = 0; i < width; ++i) dot += g[i] * y[i];
      T* gx = in->grad.data() + r * width;
      for (int64_t i = 0; i < width; ++i) gx[i] += y[i] * (g[i] - dot);
    }
  });
}

// Normalization over the last axis (no affine part).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, T eps = T(1e-5)) {
  if (a.ndim() < 1) throw Error(ErrorCode::shape_mismatch, "layer_norm: needs at least 1 axis");
  const int64_t width = a.shape().back();
  const int64_t rows = a.numel() / width;
  std::vector<T> vals(a.numel());
  std::vector<T> inv_std(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = a.values().data() + r * width;
    T mean = T(0);
    for (int64_t i = 0; i < width; ++i) mean += x[i];
    mean /= static_cast<T>(width);
    T var = T(0);
    for (int64_t i = 0; i < width; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<T>(width);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    T* y = vals.data() + r * width;
    for (int64_t i = 0; i < width; ++i) y[i] = (x[i] - mean) * inv;
  }
  return make_op<T>("layer_norm", a.shape(), std::move(vals), {a},
                    [rows, width, inv_std](Node<T>& node) {
                      Node<T>* in = node.inputs[0].get();
                      in->ensure_grad();
                      for (int64_t r = 0; r < rows; ++r) {
                        const T* y = node.values.data() + r * width;
                        const T* g = node.grad.data() + r * width;
                        T gm = T(0), gym = T(0);
                        for (int64_t i = 0; i < width; ++i) {
                          gm += g[i];
                          gym += g[i] * y[i];
                        }
                        gm /= static_cast<T>(width);
                        gym /= static_cast<T>(width);
                        T* gx = in->grad.data() + r * width;
                        for (int64_t i = 0; i < width; ++i)
                          gx[i] += inv_std[r] * (g[i] - gm - y[i] * gym);
                      }
                    });
}

// ---------------------------------------------------------------------------
// Lookups and losses

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int64_t>& ids,
                           Shape ids_shape) {
  if (table.ndim() != 2)
    throw Error(ErrorCode::shape_mismatch, "embedding_lookup: table must be 2-D, got " +
                                               format_shape(table.shape()));
  if (static_cast<int64_t>(ids.size()) != numel(ids_shape))
    throw Error(ErrorCode::shape_mismatch, "embedding_lookup: " + std::to_string(ids.size()) +
                                               " ids for shape " + format_shape(ids_shape));
  const int64_t vocab = table.shape()[0];
  const int64_t width = table.shape()[1];
  for (int64_t id : ids)
    if (id < 0 || id >= vocab)
      throw Error(ErrorCode::range_error,
                  "embedding_lookup: id " + std::to_string(id) + " outside vocabulary " +
                      std::to_string(vocab));

  Shape out_shape = std::move(ids_shape);
  out_shape.push_back(width);
  std::vector<T> vals(ids.size() * width);
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.values().data() + ids[i] * width, width, vals.data() + i * width);

  return make_op<T>("embedding_lookup", out_shape, std::move(vals), {table},
                    [ids, width](Node<T>& node) {
                      Node<T>* tab = node.inputs[0].get();
                      tab->ensure_grad();
                      for (size_t i = 0; i < ids.size(); ++i) {
                        const T* g = node.grad.data() + i * width;
                        T* row = tab->grad.data() + ids[i] * width;
                        for (int64_t c = 0; c < width; ++c) row[c] += g[c];
                      }
                    });
}

// Mean cross entropy over rows whose target differs from ignore_index.
// logits: [rows, classes].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int64_t>& targets,
                        int64_t ignore_index = -1) {
  if (logits.ndim() != 2)
    throw Error(ErrorCode::shape_mismatch,
                "cross_entropy: logits must be 2-D, got " + format_shape(logits.shape()));
  const int64_t rows = logits.shape()[0];
  const int64_t classes = logits.shape()[1];
  if (static_cast<int64_t>(targets.size()) != rows)
    throw Error(ErrorCode::shape_mismatch,
                "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                    std::to_string(rows) + " rows");

  int64_t counted = 0;
  std::vector<T> probs(logits.numel());
  double loss = 0;
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = logits.values().data() + r * classes;
    T* p = probs.data() + r * classes;
    T mx = x[0];
    for (int64_t c = 1; c < classes; ++c) mx = std::max(mx, x[c]);
    T z = T(0);
    for (int64_t c = 0; c < classes; ++c) {
      p[c] = std::exp(x[c] - mx);
      z += p[c];
    }
    for (int64_t c = 0; c < classes; ++c) p[c] /= z;
    const int64_t t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || t >= classes)
      throw Error(ErrorCode::range_error,
                  "cross_entropy: target " + std::to_string(t) + " outside " +
                      std::to_string(classes) + " classes");
    loss += std::log(static_cast<double>(z)) + static_cast<double>(mx) -
            static_cast<double>(x[t]);
    ++counted;
  }
  if (counted == 0)
    throw Error(ErrorCode::domain_error, "cross_entropy: every target is ignore_index");
  loss /= static_cast<double>(counted);

  return make_op<T>("cross_entropy", Shape{}, {static_cast<T>(loss)}, {logits},
                    [targets, ignore_index, counted, classes, probs](Node<T>& node) {
                      Node<T>* in = node.inputs[0].get();
                      in->ensure_grad();
                      const T g = node.grad[0] / static_cast<T>(counted);
                      for (size_t r = 0; r < targets.size(); ++r) {
                        if (targets[r] == ignore_index) continue;
                        const T* p = probs.data() + r * classes;
                        T* gx = in->grad.data() + r * classes;
                        for (int64_t c = 0; c < classes; ++c) gx[c] += g * p[c];
                        gx[targets[r]] -= g;
                      }
                    });
}

// Weighted mean absolute error: sum(w * |pred - target|) / sum(w).
// Gradients flow into pred only.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& weight) {
  if (pred.shape() != target.shape()) shape_error("l1_loss", pred.shape(), target.shape());
  if (pred.shape() != weight.shape()) shape_error("l1_loss", pred.shape(), weight.shape());
  double wsum = 0, loss = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    wsum += static_cast<double>(weight.values()[i]);
    loss += static_cast<double>(weight.values()[i]) *
            std::abs(static_cast<double>(pred.values()[i]) -
                     static_cast<double>(target.values()[i]));
  }
  if (wsum == 0) throw Error(ErrorCode::domain_error, "l1_loss: weights sum to zero");
  loss /= wsum;

  const auto tnode = target.node();
  const auto wnode = weight.node();
  return make_op<T>("l1_loss", Shape{}, {static_cast<T>(loss)}, {pred},
                    [tnode, wnode, wsum](Node<T>& node) {
                      Node<T>* in = node.inputs[0].get();
                      in->ensure_grad();
                      const T g = node.grad[0] / static_cast<T>(wsum);
                      for (size_t i = 0; i < in->values.size(); ++i) {
                        const T d = in->values[i] - tnode->values[i];
                        const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
                        in->grad[i] += g * wnode->values[i] * s;
                      }
                    });
}

// ---------------------------------------------------------------------------
// Reductions

namespace detail {

template <typename T>
Tensor<T> reduce(const char* name, const Tensor<T>& a, int axis, bool mean) {
  Shape out_shape;
  int64_t outer = 1, red = a.numel(), inner = 1;
  if (axis >= 0) {
    if (axis >= a.ndim())
      throw Error(ErrorCode::shape_mismatch,
                  std::string(name) + ": axis " + std::to_string(axis) + " for " +
                      format_shape(a.shape()));
    for (int d = 0; d < a.ndim(); ++d) {
      if (d == axis) continue;
      out_shape.push_back(a.shape()[d]);
    }
    red = a.shape()[axis];
    for (int d = 0; d < axis; ++d) outer *= a.shape()[d];
    for (int d = axis + 1; d < a.ndim(); ++d) inner *= a.shape()[d];
  }
  const T scale = mean ? T(1) / static_cast<T>(red) : T(1);

  std::vector<T> vals(numel(out_shape), T(0));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t r = 0; r < red; ++r)
      for (int64_t i = 0; i < inner; ++i)
        vals[o * inner + i] += a.values()[(o * red + r) * inner + i];
  for (T& v : vals) v *= scale;

  return make_op<T>(name, out_shape, std::move(vals), {a}, [outer, red, inner, scale](Node<T>& node) {
    Node<T>* in = node.inputs[0].get();
    in->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t r = 0; r < red; ++r)
        for (int64_t i = 0; i < inner; ++i)
          in->grad[(o * red + r) * inner + i] += node.grad[o * inner + i] * scale;
  });
}

}  // namespace detail

// axis = -1 reduces every element to a scalar.
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a, int axis = -1) {
  return detail::reduce("reduce_sum", a, axis, false);
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, int axis = -1) {
  return detail::reduce("reduce_mean", a, axis, true);
}

// ---------------------------------------------------------------------------
// Structured contractions

enum class TriMode { outgoing, incoming };

// Per-channel third-index contraction over pair tensors [B, n, n, C]:
//   outgoing: out[b,i,j,c] = sum_k u[b,i,k,c] * v[b,j,k,c]
//   incoming: out[b,i,j,c] = sum_k u[b,k,i,c] * v[b,k,j,c]
template <typename T>
Tensor<T> tri_contract(const Tensor<T>& u, const Tensor<T>& v, TriMode mode) {
  if (u.ndim() != 4 || u.shape() != v.shape() || u.shape()[1] != u.shape()[2])
    shape_error("tri_contract", u.shape(), v.shape());
  const int64_t batch = u.shape()[0], n = u.shape()[1], ch = u.shape()[3];
  const bool out_mode = mode == TriMode::outgoing;

  const auto at = [n, ch](int64_t b, int64_t r, int64_t c, int64_t q) {
    return ((b * n + r) * n + c) * ch + q;
  };

  std::vector<T> vals(u.numel(), T(0));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j)
        for (int64_t k = 0; k < n; ++k) {
          const int64_t ui = out_mode ? at(b, i, k, 0) : at(b, k, i, 0);
          const int64_t vi = out_mode ? at(b, j, k, 0) : at(b, k, j, 0);
          T* o = vals.data() + at(b, i, j, 0);
          const T* uu = u.values().data() + ui;
          const T* vv = v.values().data() + vi;
          for (int64_t c = 0; c < ch; ++c) o[c] += uu[c] * vv[c];
        }

  return make_op<T>("tri_contract", u.shape(), std::move(vals), {u, v},
                    [batch, n, ch, out_mode, at](Node<T>& node) {
                      Node<T>* nu = node.inputs[0].get();
                      Node<T>* nv = node.inputs[1].get();
                      if (nu->requires_grad) nu->ensure_grad();
                      if (nv->requires_grad) nv->ensure_grad();
                      for (int64_t b = 0; b < batch; ++b)
                        for (int64_t i = 0; i < n; ++i)
                          for (int64_t j = 0; j < n; ++j)
                            for (int64_t k = 0; k < n; ++k) {
                              const int64_t ui = out_mode ? at(b, i, k, 0) : at(b, k, i, 0);
                              const int64_t vi = out_mode ? at(b, j, k, 0) : at(b, k, j, 0);
                              const T* g = node.grad.data() + at(b, i, j, 0);
                              if (nu->requires_grad) {
                                T* gu = nu->grad.data() + ui;
                                const T* vv = nv->values.data() + vi;
                                for (int64_t c = 0; c < ch; ++c) gu[c] += g[c] * vv[c];
                              }
                              if (nv->requires_grad) {
                                T* gv = nv->grad.data() + vi;
                                const T* uu = nu->values.data() + ui;
                                for (int64_t c = 0; c < ch; ++c) gv[c] += g[c] * uu[c];
                              }
                            }
                    });
}

// Euclidean distances between coordinate rows: [..., n, 3] -> [..., n, n].
// The gradient of a zero distance (the diagonal) is zero.
template <typename T>
Tensor<T> pairwise_distances(const Tensor<T>& coords) {
  if (coords.ndim() < 2 || coords.shape().back() != 3)
    throw Error(ErrorCode::shape_mismatch,
                "pairwise_distances: expected [...,n,3], got " + format_shape(coords.shape()));
  const int nd = coords.ndim();
  const int64_t n = coords.shape()[nd - 2];
  const int64_t batch = coords.numel() / (n * 3);

  Shape out_shape(coords.shape().begin(), coords.shape().end() - 1);
  out_shape.back() = n;
  out_shape.push_back(n);

  std::vector<T> vals(batch * n * n, T(0));
  for (int64_t b = 0; b < batch; ++b) {
    const T* c = coords.values().data() + b * n * 3;
    T* o = vals.data() + b * n * n;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = i + 1; j < n; ++j) {
        const T dx = c[i * 3] - c[j * 3];
        const T dy = c[i * 3 + 1] - c[j * 3 + 1];
        const T dz = c[i * 3 + 2] - c[j * 3 + 2];
        const T d = std::sqrt(dx * dx + dy * dy + dz * dz);
        o[i * n + j] = d;
        o[j * n + i] = d;
      }
  }

  return make_op<T>("pairwise_distances", out_shape, std::move(vals), {coords},
                    [batch, n](Node<T>& node) {
                      Node<T>* in = node.inputs[0].get();
                      in->ensure_grad();
                      for (int64_t b = 0; b < batch; ++b) {
                        const T* c = in->values.data() + b * n * 3;
                        const T* d = node.values.data() + b * n * n;
                        const T* g = node.grad.data() + b * n * n;
                        T* gc = in->grad.data() + b * n * 3;
                        for (int64_t i = 0; i < n; ++i)
                          for (int64_t j = 0; j < n; ++j) {
                            if (i == j || d[i * n + j] <= T(0)) continue;
                            const T w = g[i * n + j] / d[i * n + j];
                            for (int64_t a = 0; a < 3; ++a) {
                              const T diff = c[i * 3 + a] - c[j * 3 + a];
                              gc[i * 3 + a] += w * diff;
                              gc[j * 3 + a] -= w * diff;
                            }
                          }
                      }
                    });
}

// ---------------------------------------------------------------------------

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.values())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace tinymol::diff
