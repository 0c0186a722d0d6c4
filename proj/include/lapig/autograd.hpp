#pragma once

// Reverse-mode automatic differentiation over Tensor<T>.
//
// A Var is a handle to a graph node. Nodes created from inputs that do not
// require gradients carry no parents and no backward closure, so inference
// never retains a graph. Calling backward() on a scalar Var accumulates
// d(root)/d(leaf) into every reachable leaf that requires gradients.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lapig/tensor.hpp"

namespace lapig {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<T>&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  T item() const { return node_->value[0]; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  void zero_grad() { node_->grad = Tensor<T>(node_->value.shape()); }

  // Seeds d(root)/d(root) = 1; root must hold a single element.
  void backward() const {
    if (node_->value.size() != 1) throw ShapeError("backward() requires a scalar root, got " + shape_str(shape()));
    if (!node_->requires_grad) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node<T>* p = n->parents[i++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (Node<T>* n : order)
      if (n->backward_fn) n->grad = Tensor<T>(n->value.shape());
    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn) n->backward_fn(n->grad);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> v) {
  return Var<T>(std::move(v), false);
}

template <class T>
Var<T> leaf(Tensor<T> v) {
  return Var<T>(std::move(v), true);
}

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <class T>
MapMat<T> as_mat(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MapMat<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
MapMat<T> as_mat(T* p, std::size_t rows, std::size_t cols) {
  return MapMat<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
CMapMat<T> as_mat(const T* p, std::size_t rows, std::size_t cols) {
  return CMapMat<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
CMapMat<T> as_mat(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return CMapMat<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// Builds a result node. The backward closure is kept only when some parent
// requires gradients.
template <class T, class Fn>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> parents, Fn&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& p : parents)
    if (p.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::forward<Fn>(backward);
  }
  return Var<T>(std::move(n));
}

template <class T>
bool wants(const Var<T>& v) {
  return v.requires_grad();
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value() + b.value();
  return detail::make_result<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    auto na = a.node(), nb = b.node();
    if (na->requires_grad) na->grad_buffer() += g;
    if (nb->requires_grad) nb->grad_buffer() += g;
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value() - b.value();
  return detail::make_result<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    auto na = a.node(), nb = b.node();
    if (na->requires_grad) na->grad_buffer() += g;
    if (nb->requires_grad) {
      auto& gb = nb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_result<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    auto na = a.node(), nb = b.node();
    if (na->requires_grad) {
      auto& ga = na->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * nb->value[i];
    }
    if (nb->requires_grad) {
      auto& gb = nb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * na->value[i];
    }
  });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "div");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  return detail::make_result<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    auto na = a.node(), nb = b.node();
    if (na->requires_grad) {
      auto& ga = na->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / nb->value[i];
    }
    if (nb->requires_grad) {
      auto& gb = nb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        T bv = nb->value[i];
        gb[i] -= g[i] * na->value[i] / (bv * bv);
      }
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value() * s;
  return detail::make_result<T>(std::move(out), {a}, [a, s](const Tensor<T>& g) {
    auto& ga = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v += s;
  return detail::make_result<T>(std::move(out), {a}, [a](const Tensor<T>& g) { a.node()->grad_buffer() += g; });
}

namespace detail {

template <class T, class F, class DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return make_result<T>(std::move(out), {a}, [a, df](const Tensor<T>& g) {
    auto n = a.node();
    auto& ga = n->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(n->value[i]);
  });
}

}  // namespace detail

template <class T>
Var<T> square(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x * x; }, [](T x) { return T(2) * x; });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x) {
        T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return std::tanh(x); },
      [](T x) {
        T y = std::tanh(x);
        return T(1) - y * y;
      });
}

// ------------------------------------------------------------- broadcasting

// x has leading dimension C; v has C entries applied over the trailing block.
template <class T>
Var<T> add_channel(const Var<T>& x, const Var<T>& v) {
  const std::size_t c = x.shape().at(0);
  if (v.size() != c) throw ShapeError("add_channel: vector of " + std::to_string(v.size()) + " for " + shape_str(x.shape()));
  const std::size_t inner = x.size() / c;
  Tensor<T> out = x.value();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < inner; ++i) out[k * inner + i] += v.value()[k];
  return detail::make_result<T>(std::move(out), {x, v}, [x, v, c, inner](const Tensor<T>& g) {
    if (x.requires_grad()) x.node()->grad_buffer() += g;
    if (v.requires_grad()) {
      auto& gv = v.node()->grad_buffer();
      for (std::size_t k = 0; k < c; ++k) {
        T s = 0;
        for (std::size_t i = 0; i < inner; ++i) s += g[k * inner + i];
        gv[k] += s;
      }
    }
  });
}

template <class T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& v) {
  const std::size_t c = x.shape().at(0);
  if (v.size() != c) throw ShapeError("mul_channel: vector of " + std::to_string(v.size()) + " for " + shape_str(x.shape()));
  const std::size_t inner = x.size() / c;
  Tensor<T> out = x.value();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < inner; ++i) out[k * inner + i] *= v.value()[k];
  return detail::make_result<T>(std::move(out), {x, v}, [x, v, c, inner](const Tensor<T>& g) {
    const auto& xv = x.value();
    const auto& vv = v.value();
    if (x.requires_grad()) {
      auto& gx = x.node()->grad_buffer();
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t i = 0; i < inner; ++i) gx[k * inner + i] += g[k * inner + i] * vv[k];
    }
    if (v.requires_grad()) {
      auto& gv = v.node()->grad_buffer();
      for (std::size_t k = 0; k < c; ++k) {
        T s = 0;
        for (std::size_t i = 0; i < inner; ++i) s += g[k * inner + i] * xv[k * inner + i];
        gv[k] += s;
      }
    }
  });
}

// x is (N, D); v has D entries added to every row.
template <class T>
Var<T> add_row(const Var<T>& x, const Var<T>& v) {
  const std::size_t d = x.shape().back();
  if (v.size() != d) throw ShapeError("add_row: vector of " + std::to_string(v.size()) + " for " + shape_str(x.shape()));
  const std::size_t n = x.size() / d;
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += v.value()[j];
  return detail::make_result<T>(std::move(out), {x, v}, [x, v, n, d](const Tensor<T>& g) {
    if (x.requires_grad()) x.node()->grad_buffer() += g;
    if (v.requires_grad()) {
      auto& gv = v.node()->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) gv[j] += g[r * d + j];
    }
  });
}

template <class T>
Var<T> mul_row(const Var<T>& x, const Var<T>& v) {
  const std::size_t d = x.shape().back();
  if (v.size() != d) throw ShapeError("mul_row: vector of " + std::to_string(v.size()) + " for " + shape_str(x.shape()));
  const std::size_t n = x.size() / d;
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] *= v.value()[j];
  return detail::make_result<T>(std::move(out), {x, v}, [x, v, n, d](const Tensor<T>& g) {
    const auto& xv = x.value();
    const auto& vv = v.value();
    if (x.requires_grad()) {
      auto& gx = x.node()->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] * vv[j];
    }
    if (v.requires_grad()) {
      auto& gv = v.node()->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) gv[j] += g[r * d + j] * xv[r * d + j];
    }
  });
}

// ---------------------------------------------------------------- structure

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  return detail::make_result<T>(std::move(out), {a}, [a](const Tensor<T>& g) {
    auto& ga = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  if (a.value().rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor<T> out({c, r});
  detail::as_mat(out, c, r) = detail::as_mat(a.value(), r, c).transpose();
  return detail::make_result<T>(std::move(out), {a}, [a, r, c](const Tensor<T>& g) {
    detail::as_mat(a.node()->grad_buffer(), r, c) += detail::as_mat(g, c, r).transpose();
  });
}

// Concatenates along the leading dimension; trailing dimensions must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t lead = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) throw ShapeError("concat: trailing shape mismatch " + shape_str(p.shape()));
    lead += p.shape()[0];
    any_grad = any_grad || p.requires_grad();
  }
  Shape s{lead};
  s.insert(s.end(), tail.begin(), tail.end());
  Tensor<T> out(s);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.size(), out.data() + off);
    off += p.size();
  }
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(out);
  if (any_grad) {
    n->requires_grad = true;
    for (const auto& p : parts) n->parents.push_back(p.node());
    n->backward_fn = [parts](const Tensor<T>& g) {
      std::size_t o = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) {
          auto& gp = p.node()->grad_buffer();
          for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[o + i];
        }
        o += p.size();
      }
    };
  }
  return Var<T>(std::move(n));
}

template <class T>
Var<T> concat(const Var<T>& a, const Var<T>& b) {
  return concat<T>(std::vector<Var<T>>{a, b});
}

// Rows [begin, end) of the leading dimension.
template <class T>
Var<T> slice(const Var<T>& a, std::size_t begin, std::size_t end) {
  const std::size_t lead = a.shape().at(0);
  if (begin > end || end > lead) throw ShapeError("slice out of range");
  const std::size_t inner = a.size() / lead;
  Shape s = a.shape();
  s[0] = end - begin;
  Tensor<T> out(s);
  std::copy(a.value().data() + begin * inner, a.value().data() + end * inner, out.data());
  return detail::make_result<T>(std::move(out), {a}, [a, begin, inner](const Tensor<T>& g) {
    auto& ga = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * inner + i] += g[i];
  });
}

// ------------------------------------------------------------------- linear algebra

// (M,K) x (K,N); trans_a / trans_b use the transposed operand instead.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.value().rank() != 2 || b.value().rank() != 2) throw ShapeError("matmul expects matrices");
  const std::size_t ar = a.shape()[0], ac = a.shape()[1], br = b.shape()[0], bc = b.shape()[1];
  const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t k2 = trans_b ? bc : br, n = trans_b ? br : bc;
  if (k != k2) throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> out({m, n});
  auto A = detail::as_mat(a.value(), ar, ac);
  auto B = detail::as_mat(b.value(), br, bc);
  auto C = detail::as_mat(out, m, n);
  if (!trans_a && !trans_b) C.noalias() = A * B;
  else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
  else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();
  return detail::make_result<T>(std::move(out), {a, b}, [a, b, trans_a, trans_b, ar, ac, br, bc, m, n](const Tensor<T>& g) {
    auto G = detail::as_mat(g, m, n);
    auto A = detail::as_mat(a.value(), ar, ac);
    auto B = detail::as_mat(b.value(), br, bc);
    if (a.requires_grad()) {
      auto GA = detail::as_mat(a.node()->grad_buffer(), ar, ac);
      // dC/dA_eff = G * B_eff^T
      if (!trans_a) {
        if (!trans_b) GA.noalias() += G * B.transpose();
        else GA.noalias() += G * B;
      } else {
        if (!trans_b) GA.noalias() += B * G.transpose();
        else GA.noalias() += B.transpose() * G.transpose();
      }
    }
    if (b.requires_grad()) {
      auto GB = detail::as_mat(b.node()->grad_buffer(), br, bc);
      if (!trans_b) {
        if (!trans_a) GB.noalias() += A.transpose() * G;
        else GB.noalias() += A * G;
      } else {
        if (!trans_a) GB.noalias() += G.transpose() * A;
        else GB.noalias() += G.transpose() * A.transpose();
      }
    }
  });
}

// ------------------------------------------------------------------- convolution

struct Conv2dGeometry {
  std::size_t in_c, in_h, in_w, k, stride, pad, out_h, out_w;
};

inline Conv2dGeometry conv_geometry(const Shape& x, std::size_t k, std::size_t stride, std::size_t pad) {
  if (x.size() != 3) throw ShapeError("conv2d expects (C,H,W), got " + shape_str(x));
  if (x[1] + 2 * pad < k || x[2] + 2 * pad < k) throw ShapeError("conv2d kernel larger than padded input");
  Conv2dGeometry g{x[0], x[1], x[2], k, stride, pad, 0, 0};
  g.out_h = (x[1] + 2 * pad - k) / stride + 1;
  g.out_w = (x[2] + 2 * pad - k) / stride + 1;
  return g;
}

namespace detail {

// Output columns [lo, hi) whose input column falls inside the image.
inline std::pair<std::size_t, std::size_t> valid_range(const Conv2dGeometry& g, std::size_t kx) {
  const long pad = static_cast<long>(g.pad), k = static_cast<long>(kx), st = static_cast<long>(g.stride);
  long lo = pad - k > 0 ? (pad - k + st - 1) / st : 0;
  long hi = static_cast<long>(g.in_w) - 1 + pad - k;
  hi = hi < 0 ? 0 : hi / st + 1;
  lo = std::min<long>(lo, static_cast<long>(g.out_w));
  hi = std::clamp<long>(hi, lo, static_cast<long>(g.out_w));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Uninitialised aligned buffer.
template <class T>
std::shared_ptr<T[]> scratch(std::size_t n) {
  constexpr std::align_val_t al{AlignedAllocator<T>::kAlign};
  return std::shared_ptr<T[]>(static_cast<T*>(::operator new(n * sizeof(T), al)), [](T* p) { ::operator delete(p, al); });
}

template <class T>
void im2col(const T* x, const Conv2dGeometry& g, T* cols) {
  const std::size_t ohw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * ohw;
        const auto [lo, hi] = valid_range(g, kx);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          std::fill(dst, dst + lo, T(0));
          std::fill(dst + hi, dst + g.out_w, T(0));
          const T* src = x + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + (lo * g.stride + kx - g.pad);
          if (g.stride == 1) {
            std::copy(src, src + (hi - lo), dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[(ox - lo) * g.stride];
          }
        }
      }
}

template <class T>
void col2im(const T* cols, const Conv2dGeometry& g, T* dx) {
  const std::size_t ohw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * ohw;
        const auto [lo, hi] = valid_range(g, kx);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          T* dst = dx + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + (lo * g.stride + kx - g.pad);
          const T* src = row + oy * g.out_w;
          if (g.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox - lo] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[(ox - lo) * g.stride] += src[ox];
          }
        }
      }
}

}  // namespace detail

// x (C,H,W), weight (O,C,k,k), bias (O) -> (O,H',W').
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t pad) {
  const auto& ws = weight.shape();
  if (ws.size() != 4 || ws[2] != ws[3]) throw ShapeError("conv2d weight must be (O,C,k,k), got " + shape_str(ws));
  const auto g = conv_geometry(x.shape(), ws[2], stride, pad);
  if (ws[1] != g.in_c) throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + " weight " + shape_str(ws));
  const std::size_t o = ws[0], ckk = g.in_c * g.k * g.k, ohw = g.out_h * g.out_w;
  if (bias.size() != o) throw ShapeError("conv2d bias size mismatch");

  auto cols = detail::scratch<T>(ckk * ohw);
  detail::im2col(x.value().data(), g, cols.get());
  Tensor<T> out({o, g.out_h, g.out_w});
  auto Y = detail::as_mat(out, o, ohw);
  Y.noalias() = detail::as_mat(weight.value(), o, ckk) * detail::as_mat<T>(static_cast<const T*>(cols.get()), ckk, ohw);
  for (std::size_t r = 0; r < o; ++r) Y.row(static_cast<Eigen::Index>(r)).array() += bias.value()[r];

  return detail::make_result<T>(std::move(out), {x, weight, bias}, [x, weight, bias, cols, g, o, ckk, ohw](const Tensor<T>& gr) {
    auto G = detail::as_mat(gr, o, ohw);
    if (weight.requires_grad())
      detail::as_mat(weight.node()->grad_buffer(), o, ckk).noalias() += G * detail::as_mat<T>(static_cast<const T*>(cols.get()), ckk, ohw).transpose();
    if (bias.requires_grad()) {
      auto& gb = bias.node()->grad_buffer();
      for (std::size_t r = 0; r < o; ++r) gb[r] += G.row(static_cast<Eigen::Index>(r)).sum();
    }
    if (x.requires_grad()) {
      auto dcols = detail::scratch<T>(ckk * ohw);
      detail::as_mat<T>(dcols.get(), ckk, ohw).noalias() = detail::as_mat(weight.value(), o, ckk).transpose() * G;
      detail::col2im(dcols.get(), g, x.node()->grad_buffer().data());
    }
  });
}

// Nearest-neighbour 2x upsampling of (C,H,W).
template <class T>
Var<T> upsample2x(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 3) throw ShapeError("upsample2x expects (C,H,W)");
  const std::size_t c = s[0], h = s[1], w = s[2];
  Tensor<T> out({c, 2 * h, 2 * w});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) out.at(k, y, xx) = x.value().at(k, y / 2, xx / 2);
  return detail::make_result<T>(std::move(out), {x}, [x, c, h, w](const Tensor<T>& g) {
    auto& gx = x.node()->grad_buffer();
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx) gx.at(k, y / 2, xx / 2) += g.at(k, y, xx);
  });
}

// (C,H,W) -> (C): spatial mean.
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 3) throw ShapeError("global_avg_pool expects (C,H,W)");
  const std::size_t c = s[0], hw = s[1] * s[2];
  Tensor<T> out({c});
  for (std::size_t k = 0; k < c; ++k) {
    T acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += x.value()[k * hw + i];
    out[k] = acc / static_cast<T>(hw);
  }
  return detail::make_result<T>(std::move(out), {x}, [x, c, hw](const Tensor<T>& g) {
    auto& gx = x.node()->grad_buffer();
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < hw; ++i) gx[k * hw + i] += g[k] / static_cast<T>(hw);
  });
}

// Mean over every k x k window that fits entirely inside the image (no padding).
template <class T>
Var<T> box_filter(const Var<T>& x, std::size_t k) {
  const auto& s = x.shape();
  if (s.size() != 3) throw ShapeError("box_filter expects (C,H,W)");
  if (k == 0 || k > s[1] || k > s[2]) throw ShapeError("box_filter window larger than image");
  const std::size_t c = s[0], h = s[1], w = s[2], oh = h - k + 1, ow = w - k + 1;
  const T inv = T(1) / static_cast<T>(k * k);
  Tensor<T> out({c, oh, ow});
  Tensor<T> rows({c, h, ow});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        T acc = 0;
        for (std::size_t d = 0; d < k; ++d) acc += x.value().at(ch, y, xx + d);
        rows.at(ch, y, xx) = acc;
      }
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        T acc = 0;
        for (std::size_t d = 0; d < k; ++d) acc += rows.at(ch, y + d, xx);
        out.at(ch, y, xx) = acc * inv;
      }
  return detail::make_result<T>(std::move(out), {x}, [x, c, k, oh, ow, inv](const Tensor<T>& g) {
    auto& gx = x.node()->grad_buffer();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const T v = g.at(ch, y, xx) * inv;
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) gx.at(ch, y + dy, xx + dx) += v;
        }
  });
}

// ------------------------------------------------------------------- row-wise

// Treats x as (R, n) with n = trailing size; each row is shifted to zero mean
// and scaled to unit variance.
template <class T>
Var<T> normalize_rows(const Var<T>& x, std::size_t rows, T eps = T(1e-5)) {
  if (rows == 0 || x.size() % rows) throw ShapeError("normalize_rows: bad row count");
  const std::size_t n = x.size() / rows;
  Tensor<T> out(x.shape());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.value().data() + r * n;
    T mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += src[i];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = (src[i] - mu) * is;
  }
  auto y = std::make_shared<Tensor<T>>(out);
  return detail::make_result<T>(std::move(out), {x}, [x, rows, n, inv_std, y](const Tensor<T>& g) {
    auto& gx = x.node()->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      T mg = 0, mgy = 0;
      for (std::size_t i = 0; i < n; ++i) {
        mg += g[r * n + i];
        mgy += g[r * n + i] * (*y)[r * n + i];
      }
      mg /= static_cast<T>(n);
      mgy /= static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i)
        gx[r * n + i] += (*inv_std)[r] * (g[r * n + i] - mg - (*y)[r * n + i] * mgy);
    }
  });
}

// Scales each row of (R, D) to unit L2 norm.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Tensor<T> out(x.shape());
  auto norms = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += x.value()[r * d + j] * x.value()[r * d + j];
    const T nr = std::sqrt(ss + eps);
    (*norms)[r] = nr;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.value()[r * d + j] / nr;
  }
  auto y = std::make_shared<Tensor<T>>(out);
  return detail::make_result<T>(std::move(out), {x}, [x, rows, d, norms, y](const Tensor<T>& g) {
    auto& gx = x.node()->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * (*y)[r * d + j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (g[r * d + j] - (*y)[r * d + j] * dot) / (*norms)[r];
    }
  });
}

template <class T>
Var<T> softmax_rows(const Var<T>& x) {
  if (x.value().rank() != 2) throw ShapeError("softmax_rows expects a matrix");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.value().data() + r * cols;
    T mx = *std::max_element(src, src + cols);
    T z = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      out[r * cols + j] = std::exp(src[j] - mx);
      z += out[r * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] /= z;
  }
  auto y = std::make_shared<Tensor<T>>(out);
  return detail::make_result<T>(std::move(out), {x}, [x, rows, cols, y](const Tensor<T>& g) {
    auto& gx = x.node()->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * (*y)[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += (*y)[r * cols + j] * (g[r * cols + j] - dot);
    }
  });
}

// Rows of table (V, D) gathered by ids -> (L, D).
template <class T>
Var<T> embedding(const Var<T>& table, const std::vector<std::size_t>& ids) {
  const std::size_t v = table.shape().at(0), d = table.shape().at(1);
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) throw std::out_of_range("embedding id " + std::to_string(ids[i]) + " >= vocabulary " + std::to_string(v));
    std::copy(table.value().data() + ids[i] * d, table.value().data() + (ids[i] + 1) * d, out.data() + i * d);
  }
  return detail::make_result<T>(std::move(out), {table}, [table, ids, d](const Tensor<T>& g) {
    auto& gt = table.node()->grad_buffer();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
  });
}

// ------------------------------------------------------------------- reductions

template <class T>
Var<T> sum(const Var<T>& x) {
  Tensor<T> out({1}, lapig::sum(x.value()));
  return detail::make_result<T>(std::move(out), {x}, [x](const Tensor<T>& g) {
    auto& gx = x.node()->grad_buffer();
    for (auto& v : gx.values()) v += g[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// Mean of squared differences.
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mse");
  const std::size_t n = a.size();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  Tensor<T> out({1}, acc / static_cast<T>(n));
  return detail::make_result<T>(std::move(out), {a, b}, [a, b, n](const Tensor<T>& g) {
    const T s = T(2) * g[0] / static_cast<T>(n);
    if (a.requires_grad()) {
      auto& ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) ga[i] += s * (a.value()[i] - b.value()[i]);
    }
    if (b.requires_grad()) {
      auto& gb = b.node()->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gb[i] -= s * (a.value()[i] - b.value()[i]);
    }
  });
}

// Mean over rows of -log softmax(logits)[label].
template <class T>
Var<T> cross_entropy_rows(const Var<T>& logits, const std::vector<std::size_t>& labels) {
  if (logits.value().rank() != 2) throw ShapeError("cross_entropy_rows expects a matrix");
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  if (labels.size() != rows) throw ShapeError("cross_entropy_rows: label count mismatch");
  auto probs = std::make_shared<Tensor<T>>(logits.shape());
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= cols) throw std::out_of_range("label " + std::to_string(labels[r]) + " out of range");
    const T* src = logits.value().data() + r * cols;
    const T mx = *std::max_element(src, src + cols);
    T z = 0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(src[j] - mx);
    const T lse = mx + std::log(z);
    loss += lse - src[labels[r]];
    for (std::size_t j = 0; j < cols; ++j) (*probs)[r * cols + j] = std::exp(src[j] - lse);
  }
  Tensor<T> out({1}, loss / static_cast<T>(rows));
  return detail::make_result<T>(std::move(out), {logits}, [logits, labels, probs, rows, cols](const Tensor<T>& g) {
    auto& gl = logits.node()->grad_buffer();
    const T s = g[0] / static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < cols; ++j)
        gl[r * cols + j] += s * ((*probs)[r * cols + j] - (j == labels[r] ? T(1) : T(0)));
  });
}

}  // namespace lapig
