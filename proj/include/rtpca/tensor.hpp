#pragma once

// Minimal deterministic tensor kernel with reverse-mode automatic
// differentiation. Every higher module builds exclusively on the operations
// defined here.
//
// Tensors are immutable after construction except for gradient accumulation
// (and explicit parameter updates by an optimizer, the single writer). Ops
// are pure functions of their inputs plus an explicitly passed random
// stream. Each op output records its parents and an adjoint closure; a
// GradTape replays those closures in reverse execution order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "rtpca/random.hpp"

// Finite-value checks are on in debug builds; define RTPCA_FINITE_CHECKS=0/1
// to force either way.
#if !defined(RTPCA_FINITE_CHECKS)
#if defined(NDEBUG)
#define RTPCA_FINITE_CHECKS 0
#else
#define RTPCA_FINITE_CHECKS 1
#endif
#endif

namespace rtpca {

using Shape = std::vector<int64_t>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct RangeError : std::out_of_range {
  using std::out_of_range::out_of_range;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // allocated on demand, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  std::function<void(TensorNode<S>&)> backward;
};

namespace detail {

template <class S>
inline void check_finite(const char* where, const std::vector<S>& v) {
#if RTPCA_FINITE_CHECKS
  for (S x : v) {
    if (!std::isfinite(static_cast<double>(x))) {
      throw NumericError(std::string(where) + ": non-finite value produced");
    }
  }
#else
  (void)where;
  (void)v;
#endif
}

}  // namespace detail

template <class S>
class Tensor {
 public:
  using Node = TensorNode<S>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape) {
    return from_data(std::move(shape), {}, S(0));
  }

  static Tensor full(Shape shape, S value) {
    return from_data(std::move(shape), {}, value);
  }

  static Tensor scalar(S value) { return full(Shape{}, value); }

  static Tensor from_data(Shape shape, std::vector<S> data, S fill = S(0)) {
    auto n = std::make_shared<Node>();
    const int64_t count = numel_of(shape);
    if (!data.empty() && static_cast<int64_t>(data.size()) != count) {
      throw ShapeError("tensor: " + std::to_string(data.size()) +
                       " values do not fill shape " + shape_str(shape));
    }
    n->shape = std::move(shape);
    if (data.empty()) {
      n->data.assign(static_cast<size_t>(count), fill);
    } else {
      n->data = std::move(data);
      detail::check_finite("tensor", n->data);
    }
    return Tensor(n);
  }

  bool valid() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(n_->shape.size()); }
  int64_t dim(int64_t i) const {
    if (i < 0) i += ndim();
    return n_->shape[static_cast<size_t>(i)];
  }
  int64_t numel() const { return static_cast<int64_t>(n_->data.size()); }

  const std::vector<S>& values() const { return n_->data; }
  // Mutable access exists for the optimizer (single writer) and test
  // harnesses; everything else must treat tensors as immutable.
  std::vector<S>& mutable_values() { return n_->data; }

  S item() const {
    if (numel() != 1) {
      throw UsageError("item: tensor of shape " + shape_str(shape()) +
                       " is not a scalar");
    }
    return n_->data[0];
  }

  S at(std::initializer_list<int64_t> idx) const {
    int64_t off = 0;
    int64_t stride = 1;
    const Shape& sh = shape();
    if (idx.size() != sh.size()) throw UsageError("at: rank mismatch");
    auto it = idx.end();
    for (int64_t d = ndim() - 1; d >= 0; --d) {
      --it;
      off += *it * stride;
      stride *= sh[static_cast<size_t>(d)];
    }
    return n_->data[static_cast<size_t>(off)];
  }

  bool requires_grad() const { return n_->requires_grad; }

  Tensor& set_requires_grad(bool flag) {
    if (flag && !n_->parents.empty()) {
      throw UsageError("set_requires_grad: only leaf tensors can be marked");
    }
    n_->requires_grad = flag;
    return *this;
  }

  bool is_leaf() const { return n_->parents.empty() && !n_->backward; }

  // Gradient of the last backward() pass; zeros when the loss did not reach
  // this leaf. Accumulates across backward() calls until zero_grad().
  const std::vector<S>& grad() const {
    if (n_->grad.empty()) n_->grad.assign(n_->data.size(), S(0));
    return n_->grad;
  }

  bool has_grad() const { return !n_->grad.empty(); }

  void zero_grad() { n_->grad.assign(n_->data.size(), S(0)); }

  // Same values, detached from the graph.
  Tensor detach() const {
    auto n = std::make_shared<Node>();
    n->shape = n_->shape;
    n->data = n_->data;
    return Tensor(n);
  }

  template <class T>
  Tensor<T> cast() const {
    std::vector<T> out(n_->data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(n_->data[i]);
    return Tensor<T>::from_data(n_->shape, std::move(out));
  }

  const std::shared_ptr<Node>& node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

template <class S>
Tensor<S> rand_uniform(Shape shape, double lo, double hi, Rng& rng) {
  std::vector<S> v(static_cast<size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
  return Tensor<S>::from_data(std::move(shape), std::move(v));
}

template <class S>
Tensor<S> rand_normal(Shape shape, double mean, double stddev, Rng& rng) {
  std::vector<S> v(static_cast<size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<S>(rng.normal(mean, stddev));
  return Tensor<S>::from_data(std::move(shape), std::move(v));
}

namespace detail {

template <class S>
Tensor<S> make_result(Shape shape, std::vector<S> data,
                      std::initializer_list<Tensor<S>> inputs,
                      std::function<void(TensorNode<S>&)> backward,
                      const char* op_name) {
  check_finite(op_name, data);
  auto n = std::make_shared<TensorNode<S>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool need = false;
  for (const auto& t : inputs) need = need || t.requires_grad();
  if (need) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backward = std::move(backward);
  }
  return Tensor<S>(n);
}

template <class S>
inline void ensure_grad(TensorNode<S>& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), S(0));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (size_t i = 0; i < nd; ++i) {
    const int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("broadcast: incompatible shapes " + shape_str(a) +
                       " and " + shape_str(b));
    }
    out[nd - 1 - i] = std::max(da, db);
  }
  return out;
}

// Element strides of `in` expanded to the dims of `out` (0 on broadcast axes).
inline std::vector<int64_t> bcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  int64_t stride = 1;
  int64_t j = static_cast<int64_t>(out.size()) - 1;
  for (int64_t i = static_cast<int64_t>(in.size()) - 1; i >= 0; --i, --j) {
    if (in[static_cast<size_t>(i)] != 1) st[static_cast<size_t>(j)] = stride;
    stride *= in[static_cast<size_t>(i)];
  }
  return st;
}

// Row-major odometer over `shape`; calls f(lin, off_a, off_b).
template <class F>
void for_each2(const Shape& shape, const std::vector<int64_t>& sa,
               const std::vector<int64_t>& sb, F&& f) {
  const int64_t n = numel_of(shape);
  const int64_t nd = static_cast<int64_t>(shape.size());
  if (nd == 0) {
    if (n > 0) f(int64_t(0), int64_t(0), int64_t(0));
    return;
  }
  std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
  int64_t oa = 0, ob = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    f(lin, oa, ob);
    for (int64_t d = nd - 1; d >= 0; --d) {
      const size_t ud = static_cast<size_t>(d);
      ++idx[ud];
      oa += sa[ud];
      ob += sb[ud];
      if (idx[ud] < shape[ud]) break;
      oa -= sa[ud] * shape[ud];
      ob -= sb[ud] * shape[ud];
      idx[ud] = 0;
    }
  }
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops (NumPy-style trailing-axis broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Sub, Mul };

template <class S>
Tensor<S> binary_elementwise(const Tensor<S>& a, const Tensor<S>& b,
                             BinKind kind, const char* name) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = bcast_strides(a.shape(), out_shape);
  const auto sb = bcast_strides(b.shape(), out_shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<S> out(static_cast<size_t>(numel_of(out_shape)));

  bool fwd_trailing = a.shape() == out_shape &&
                      b.ndim() <= static_cast<int64_t>(out_shape.size());
  if (fwd_trailing) {
    const int64_t off = static_cast<int64_t>(out_shape.size()) - b.ndim();
    for (int64_t i = 0; i < b.ndim(); ++i) {
      if (b.dim(i) != out_shape[static_cast<size_t>(off + i)]) {
        fwd_trailing = false;
        break;
      }
    }
  }

  if (same_shape(a.shape(), b.shape())) {
    // fast path, no odometer
    switch (kind) {
      case BinKind::Add:
        for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
        break;
      case BinKind::Sub:
        for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
        break;
      case BinKind::Mul:
        for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
        break;
    }
  } else if (fwd_trailing) {
    const size_t bn_count = bv.size();
    for (size_t i = 0; i < out.size(); ++i) {
      const S y = bv[i % bn_count];
      out[i] = kind == BinKind::Add ? av[i] + y
                                    : (kind == BinKind::Sub ? av[i] - y
                                                            : av[i] * y);
    }
  } else {
    for_each2(out_shape, sa, sb, [&](int64_t lin, int64_t oa, int64_t ob) {
      const S x = av[static_cast<size_t>(oa)];
      const S y = bv[static_cast<size_t>(ob)];
      out[static_cast<size_t>(lin)] =
          kind == BinKind::Add ? x + y : (kind == BinKind::Sub ? x - y : x * y);
    });
  }

  // trailing-block broadcast (bias pattern): b's dims equal the trailing
  // dims of the output while a matches the output exactly
  const bool a_full = a.shape() == out_shape;
  bool b_trailing = a_full && b.ndim() <= static_cast<int64_t>(out_shape.size());
  if (b_trailing) {
    const int64_t off = static_cast<int64_t>(out_shape.size()) - b.ndim();
    for (int64_t i = 0; i < b.ndim(); ++i) {
      if (b.dim(i) != out_shape[static_cast<size_t>(off + i)]) {
        b_trailing = false;
        break;
      }
    }
  }

  auto an = a.node();
  auto bn = b.node();
  auto bw = [an, bn, out_shape, sa, sb, kind, b_trailing](TensorNode<S>& o) {
    const bool need_a = an->requires_grad;
    const bool need_b = bn->requires_grad;
    if (need_a) ensure_grad(*an);
    if (need_b) ensure_grad(*bn);
    const S sgn = kind == BinKind::Sub ? S(-1) : S(1);
    if (an->shape == o.shape && bn->shape == o.shape) {
      for (size_t i = 0; i < o.grad.size(); ++i) {
        const S g = o.grad[i];
        if (kind == BinKind::Mul) {
          if (need_a) an->grad[i] += g * bn->data[i];
          if (need_b) bn->grad[i] += g * an->data[i];
        } else {
          if (need_a) an->grad[i] += g;
          if (need_b) bn->grad[i] += g * sgn;
        }
      }
      return;
    }
    if (b_trailing) {
      const size_t bn_count = bn->data.size();
      for (size_t i = 0; i < o.grad.size(); ++i) {
        const S g = o.grad[i];
        const size_t bi = i % bn_count;
        if (kind == BinKind::Mul) {
          if (need_a) an->grad[i] += g * bn->data[bi];
          if (need_b) bn->grad[bi] += g * an->data[i];
        } else {
          if (need_a) an->grad[i] += g;
          if (need_b) bn->grad[bi] += g * sgn;
        }
      }
      return;
    }
    for_each2(out_shape, sa, sb, [&](int64_t lin, int64_t oa, int64_t ob) {
      const S g = o.grad[static_cast<size_t>(lin)];
      switch (kind) {
        case BinKind::Add:
          if (need_a) an->grad[static_cast<size_t>(oa)] += g;
          if (need_b) bn->grad[static_cast<size_t>(ob)] += g;
          break;
        case BinKind::Sub:
          if (need_a) an->grad[static_cast<size_t>(oa)] += g;
          if (need_b) bn->grad[static_cast<size_t>(ob)] -= g;
          break;
        case BinKind::Mul:
          if (need_a)
            an->grad[static_cast<size_t>(oa)] +=
                g * bn->data[static_cast<size_t>(ob)];
          if (need_b)
            bn->grad[static_cast<size_t>(ob)] +=
                g * an->data[static_cast<size_t>(oa)];
          break;
      }
    });
  };
  return make_result<S>(out_shape, std::move(out), {a, b}, std::move(bw), name);
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_elementwise(a, b, detail::BinKind::Add, "add");
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_elementwise(a, b, detail::BinKind::Sub, "sub");
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_elementwise(a, b, detail::BinKind::Mul, "mul");
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  const auto& xv = x.values();
  std::vector<S> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  auto xn = x.node();
  return detail::make_result<S>(
      x.shape(), std::move(out), {x},
      [xn, c](TensorNode<S>& o) {
        detail::ensure_grad(*xn);
        for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i] * c;
      },
      "scale");
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
  const auto& xv = x.values();
  std::vector<S> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + c;
  auto xn = x.node();
  return detail::make_result<S>(
      x.shape(), std::move(out), {x},
      [xn](TensorNode<S>& o) {
        detail::ensure_grad(*xn);
        for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
      },
      "add_scalar");
}

template <class S>
Tensor<S> neg(const Tensor<S>& x) {
  return scale(x, S(-1));
}

// sqrt with the subgradient 0 at 0, so exact-zero residuals stay exact.
template <class S>
Tensor<S> sqrt(const Tensor<S>& x) {
  const auto& xv = x.values();
  std::vector<S> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<S>(std::sqrt(static_cast<double>(xv[i])));
  auto xn = x.node();
  return detail::make_result<S>(
      x.shape(), std::move(out), {x},
      [xn](TensorNode<S>& o) {
        detail::ensure_grad(*xn);
        for (size_t i = 0; i < o.grad.size(); ++i) {
          const S y = o.data[i];
          if (y != S(0)) xn->grad[i] += o.grad[i] * S(0.5) / y;
        }
      },
      "sqrt");
}

// exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  const auto& xv = x.values();
  std::vector<S> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) {
    const double v = static_cast<double>(xv[i]);
    out[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865476)));
  }
  auto xn = x.node();
  return detail::make_result<S>(
      x.shape(), std::move(out), {x},
      [xn](TensorNode<S>& o) {
        detail::ensure_grad(*xn);
        constexpr double inv_sqrt2 = 0.7071067811865476;
        constexpr double inv_sqrt2pi = 0.3989422804014327;
        for (size_t i = 0; i < o.grad.size(); ++i) {
          const double v = static_cast<double>(xn->data[i]);
          const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
          const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
          xn->grad[i] += o.grad[i] * static_cast<S>(cdf + v * pdf);
        }
      },
      "gelu");
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  if (numel_of(new_shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  auto xn = x.node();
  std::vector<S> out = x.values();
  return detail::make_result<S>(
      std::move(new_shape), std::move(out), {x},
      [xn](TensorNode<S>& o) {
        detail::ensure_grad(*xn);
        for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
      },
      "reshape");
}

template <class S>
Tensor<S> transpose(const Tensor<S>& x, std::vector<int64_t> perm) {
  const int64_t nd = x.ndim();
  if (static_cast<int64_t>(perm.size()) != nd) {
    throw ShapeError("transpose: permutation rank mismatch");
  }
  Shape out_shape(static_cast<size_t>(nd));
  for (int64_t i = 0; i < nd; ++i)
    out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);

  // strides of x viewed through the permutation
  std::vector<int64_t> xst(static_cast<size_t>(nd), 1);
  for (int64_t d = nd - 2; d >= 0; --d)
    xst[static_cast<size_t>(d)] =
        xst[static_cast<size_t>(d + 1)] * x.dim(d + 1);
  std::vector<int64_t> pst(static_cast<size_t>(nd));
  for (int64_t i = 0; i < nd; ++i)
    pst[static_cast<size_t>(i)] = xst[static_cast<size_t>(perm[static_cast<size_t>(i)])];

  // when the last axis stays in place, rows of that axis move as blocks
  const bool last_fixed = perm[static_cast<size_t>(nd - 1)] == nd - 1 && nd >= 2;
  const int64_t block = last_fixed ? x.dim(nd - 1) : 1;
  const Shape iter_shape = last_fixed
                               ? Shape(out_shape.begin(), out_shape.end() - 1)
                               : out_shape;
  const std::vector<int64_t> iter_pst =
      last_fixed ? std::vector<int64_t>(pst.begin(), pst.end() - 1) : pst;

  const auto& xv = x.values();
  std::vector<S> out(xv.size());
  const std::vector<int64_t> zero(iter_shape.size(), 0);
  detail::for_each2(iter_shape, iter_pst, zero,
                    [&](int64_t lin, int64_t ox, int64_t) {
                      std::copy_n(xv.begin() + ox, block,
                                  out.begin() + lin * block);
                    });

  auto xn = x.node();
  auto bw = [xn, iter_shape, iter_pst, zero, block](TensorNode<S>& o) {
    detail::ensure_grad(*xn);
    detail::for_each2(iter_shape, iter_pst, zero,
                      [&](int64_t lin, int64_t ox, int64_t) {
                        const S* src = o.grad.data() + lin * block;
                        S* dst = xn->grad.data() + ox;
                        for (int64_t i = 0; i < block; ++i) dst[i] += src[i];
                      });
  };
  return detail::make_result<S>(std::move(out_shape), std::move(out), {x},
                                std::move(bw), "transpose");
}

template <class S>
Tensor<S> transpose_last2(const Tensor<S>& x) {
  std::vector<int64_t> perm(static_cast<size_t>(x.ndim()));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return transpose(x, std::move(perm));
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int64_t axis) {
  if (xs.empty()) throw UsageError("concat: no inputs");
  const int64_t nd = xs[0].ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeError("concat: axis out of range");
  Shape out_shape = xs[0].shape();
  int64_t total_axis = 0;
  for (const auto& t : xs) {
    if (t.ndim() != nd) throw ShapeError("concat: rank mismatch");
    for (int64_t d = 0; d < nd; ++d) {
      if (d != axis && t.dim(d) != out_shape[static_cast<size_t>(d)]) {
        throw ShapeError("concat: shape " + shape_str(t.shape()) +
                         " incompatible with " + shape_str(out_shape) +
                         " on axis " + std::to_string(axis));
      }
    }
    total_axis += t.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = total_axis;

  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int64_t d = axis + 1; d < nd; ++d)
    inner *= out_shape[static_cast<size_t>(d)];

  std::vector<S> out(static_cast<size_t>(numel_of(out_shape)));
  const int64_t out_row = total_axis * inner;
  int64_t axis_off = 0;
  for (const auto& t : xs) {
    const auto& tv = t.values();
    const int64_t seg = t.dim(axis) * inner;
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(tv.begin() + o * seg, seg,
                  out.begin() + o * out_row + axis_off * inner);
    }
    axis_off += t.dim(axis);
  }

  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  std::vector<int64_t> axis_dims;
  bool need = false;
  for (const auto& t : xs) {
    nodes.push_back(t.node());
    axis_dims.push_back(t.dim(axis));
    need = need || t.requires_grad();
  }

  auto n = std::make_shared<TensorNode<S>>();
  n->shape = out_shape;
  n->data = std::move(out);
  detail::check_finite("concat", n->data);
  if (need) {
    n->requires_grad = true;
    n->parents = nodes;
    n->backward = [nodes, axis_dims, outer, inner,
                   out_row](TensorNode<S>& o) {
      int64_t axis_off = 0;
      for (size_t i = 0; i < nodes.size(); ++i) {
        auto& p = *nodes[i];
        const int64_t seg = axis_dims[i] * inner;
        if (p.requires_grad) {
          detail::ensure_grad(p);
          for (int64_t ot = 0; ot < outer; ++ot) {
            const S* src = o.grad.data() + ot * out_row + axis_off * inner;
            S* dst = p.grad.data() + ot * seg;
            for (int64_t j = 0; j < seg; ++j) dst[j] += src[j];
          }
        }
        axis_off += axis_dims[i];
      }
    };
  }
  return Tensor<S>(n);
}

template <class S>
Tensor<S> slice(const Tensor<S>& x, int64_t axis, int64_t start, int64_t len) {
  const int64_t nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeError("slice: axis out of range");
  if (start < 0 || len < 0 || start + len > x.dim(axis)) {
    throw RangeError("slice: [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of range for axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;

  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int64_t d = axis + 1; d < nd; ++d) inner *= x.dim(d);
  const int64_t in_row = x.dim(axis) * inner;
  const int64_t out_seg = len * inner;

  const auto& xv = x.values();
  std::vector<S> out(static_cast<size_t>(numel_of(out_shape)));
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + o * in_row + start * inner, out_seg,
                out.begin() + o * out_seg);
  }

  auto xn = x.node();
  auto bw = [xn, outer, inner, in_row, out_seg, start](TensorNode<S>& o) {
    detail::ensure_grad(*xn);
    for (int64_t ot = 0; ot < outer; ++ot) {
      const S* src = o.grad.data() + ot * out_seg;
      S* dst = xn->grad.data() + ot * in_row + start * inner;
      for (int64_t j = 0; j < out_seg; ++j) dst[j] += src[j];
    }
  };
  return detail::make_result<S>(std::move(out_shape), std::move(out), {x},
                                std::move(bw), "slice");
}

// Repeats each row of the second-to-last axis r times (nearest-neighbour
// sequence upsampling): [..., n, d] -> [..., n*r, d].
template <class S>
Tensor<S> repeat_rows(const Tensor<S>& x, int64_t r) {
  if (x.ndim() < 2) throw ShapeError("repeat_rows: need at least 2 dims");
  if (r < 1) throw RangeError("repeat_rows: r must be >= 1");
  const int64_t d = x.dim(-1);
  const int64_t n = x.dim(-2);
  const int64_t batch = x.numel() / (n * d);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = n * r;

  const auto& xv = x.values();
  std::vector<S> out(static_cast<size_t>(batch * n * r * d));
  for (int64_t b = 0; b < batch; ++b) {
    const S* src = xv.data() + b * n * d;
    S* dst = out.data() + b * n * r * d;
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t k = 0; k < r; ++k) {
        std::copy_n(src + i * d, d, dst + (i * r + k) * d);
      }
    }
  }

  auto xn = x.node();
  auto bw = [xn, batch, n, r, d](TensorNode<S>& o) {
    detail::ensure_grad(*xn);
    for (int64_t b = 0; b < batch; ++b) {
      const S* src = o.grad.data() + b * n * r * d;
      S* dst = xn->grad.data() + b * n * d;
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t k = 0; k < r; ++k) {
          for (int64_t c = 0; c < d; ++c) {
            dst[i * d + c] += src[(i * r + k) * d + c];
          }
        }
      }
    }
  };
  return detail::make_result<S>(std::move(out_shape), std::move(out), {x},
                                std::move(bw), "repeat_rows");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  S total = S(0);
  for (S v : x.values()) total += v;
  auto xn = x.node();
  return detail::make_result<S>(
      Shape{}, std::vector<S>{total}, {x},
      [xn](TensorNode<S>& o) {
        detail::ensure_grad(*xn);
        const S g = o.grad[0];
        for (auto& gv : xn->grad) gv += g;
      },
      "sum_all");
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
  return scale(sum_all(x), S(1) / static_cast<S>(x.numel()));
}

template <class S>
Tensor<S> sum_axis(const Tensor<S>& x, int64_t axis) {
  const int64_t nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeError("sum_axis: axis out of range");
  Shape out_shape;
  for (int64_t d = 0; d < nd; ++d)
    if (d != axis) out_shape.push_back(x.dim(d));

  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int64_t d = axis + 1; d < nd; ++d) inner *= x.dim(d);
  const int64_t alen = x.dim(axis);

  const auto& xv = x.values();
  std::vector<S> out(static_cast<size_t>(outer * inner), S(0));
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t t = 0; t < alen; ++t) {
      const S* src = xv.data() + (o * alen + t) * inner;
      S* dst = out.data() + o * inner;
      for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
    }
  }

  auto xn = x.node();
  auto bw = [xn, outer, inner, alen](TensorNode<S>& o) {
    detail::ensure_grad(*xn);
    for (int64_t ot = 0; ot < outer; ++ot) {
      const S* src = o.grad.data() + ot * inner;
      for (int64_t t = 0; t < alen; ++t) {
        S* dst = xn->grad.data() + (ot * alen + t) * inner;
        for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
      }
    }
  };
  return detail::make_result<S>(std::move(out_shape), std::move(out), {x},
                                std::move(bw), "sum_axis");
}

template <class S>
Tensor<S> mean_axis(const Tensor<S>& x, int64_t axis) {
  const int64_t alen = x.dim(axis);
  return scale(sum_axis(x, axis), S(1) / static_cast<S>(alen));
}

// ---------------------------------------------------------------------------
// matmul: [.., p, q] x [.., q, s] with broadcastable leading batch dims
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw ShapeError("matmul: operands must have >= 2 dims, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int64_t p = a.dim(-2), q = a.dim(-1);
  const int64_t q2 = b.dim(-2), s = b.dim(-1);
  if (q != q2) {
    throw ShapeError("matmul: inner extents differ: " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  const Shape ba(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  const Shape ob = detail::broadcast_shape(ba, bb);
  Shape out_shape = ob;
  out_shape.push_back(p);
  out_shape.push_back(s);

  const int64_t nbatch = numel_of(ob);
  std::vector<int64_t> offa(static_cast<size_t>(nbatch));
  std::vector<int64_t> offb(static_cast<size_t>(nbatch));
  detail::for_each2(ob, detail::bcast_strides(ba, ob),
                    detail::bcast_strides(bb, ob),
                    [&](int64_t lin, int64_t oa, int64_t obf) {
                      offa[static_cast<size_t>(lin)] = oa * p * q;
                      offb[static_cast<size_t>(lin)] = obf * q * s;
                    });

  using Mat =
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<S> out(static_cast<size_t>(nbatch * p * s));
  for (int64_t i = 0; i < nbatch; ++i) {
    Eigen::Map<const Mat> A(av.data() + offa[static_cast<size_t>(i)], p, q);
    Eigen::Map<const Mat> B(bv.data() + offb[static_cast<size_t>(i)], q, s);
    Eigen::Map<Mat> C(out.data() + i * p * s, p, s);
    C.noalias() = A * B;
  }

  auto an = a.node();
  auto bn = b.node();
  auto bw = [an, bn, offa, offb, nbatch, p, q, s](TensorNode<S>& o) {
    const bool need_a = an->requires_grad;
    const bool need_b = bn->requires_grad;
    if (need_a) detail::ensure_grad(*an);
    if (need_b) detail::ensure_grad(*bn);
    for (int64_t i = 0; i < nbatch; ++i) {
      Eigen::Map<const Mat> A(an->data.data() + offa[static_cast<size_t>(i)],
                              p, q);
      Eigen::Map<const Mat> B(bn->data.data() + offb[static_cast<size_t>(i)],
                              q, s);
      Eigen::Map<const Mat> G(o.grad.data() + i * p * s, p, s);
      if (need_a) {
        Eigen::Map<Mat> dA(an->grad.data() + offa[static_cast<size_t>(i)], p,
                           q);
        dA.noalias() += G * B.transpose();
      }
      if (need_b) {
        Eigen::Map<Mat> dB(bn->grad.data() + offb[static_cast<size_t>(i)], q,
                           s);
        dB.noalias() += A.transpose() * G;
      }
    }
  };
  return detail::make_result<S>(std::move(out_shape), std::move(out), {a, b},
                                std::move(bw), "matmul");
}

// ---------------------------------------------------------------------------
// softmax along an axis, max-subtracted for stability
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> softmax(const Tensor<S>& x, int64_t axis) {
  const int64_t nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeError("softmax: axis out of range");
#if RTPCA_FINITE_CHECKS
  detail::check_finite("softmax input", x.values());
#endif
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int64_t d = axis + 1; d < nd; ++d) inner *= x.dim(d);
  const int64_t alen = x.dim(axis);

  const auto& xv = x.values();
  std::vector<S> out(xv.size());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t j = 0; j < inner; ++j) {
      const int64_t base = o * alen * inner + j;
      S mx = xv[static_cast<size_t>(base)];
      for (int64_t t = 1; t < alen; ++t)
        mx = std::max(mx, xv[static_cast<size_t>(base + t * inner)]);
      S denom = S(0);
      for (int64_t t = 0; t < alen; ++t) {
        const S e = static_cast<S>(
            std::exp(static_cast<double>(xv[static_cast<size_t>(base + t * inner)] - mx)));
        out[static_cast<size_t>(base + t * inner)] = e;
        denom += e;
      }
      const S inv = S(1) / denom;
      for (int64_t t = 0; t < alen; ++t)
        out[static_cast<size_t>(base + t * inner)] *= inv;
    }
  }

  auto xn = x.node();
  auto bw = [xn, outer, inner, alen](TensorNode<S>& o) {
    detail::ensure_grad(*xn);
    for (int64_t ot = 0; ot < outer; ++ot) {
      for (int64_t j = 0; j < inner; ++j) {
        const int64_t base = ot * alen * inner + j;
        S dot = S(0);
        for (int64_t t = 0; t < alen; ++t) {
          const size_t idx = static_cast<size_t>(base + t * inner);
          dot += o.grad[idx] * o.data[idx];
        }
        for (int64_t t = 0; t < alen; ++t) {
          const size_t idx = static_cast<size_t>(base + t * inner);
          xn->grad[idx] += (o.grad[idx] - dot) * o.data[idx];
        }
      }
    }
  };
  return detail::make_result<S>(x.shape(), std::move(out), {x}, std::move(bw),
                                "softmax");
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis: y = gamma * (x - mu) / sqrt(var + eps) + beta
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, double eps = 1e-5) {
  const int64_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: affine shape " + shape_str(gamma.shape()) +
                     " does not match feature dim " + std::to_string(d));
  }
  if (eps <= 0) throw ConfigError("layer_norm: eps must be > 0");
  const int64_t tokens = x.numel() / d;

  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<S> out(xv.size());
  std::vector<S> mean(static_cast<size_t>(tokens));
  std::vector<S> invstd(static_cast<size_t>(tokens));
  for (int64_t t = 0; t < tokens; ++t) {
    const S* row = xv.data() + t * d;
    S mu = S(0);
    for (int64_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<S>(d);
    S var = S(0);
    for (int64_t i = 0; i < d; ++i) {
      const S c = row[i] - mu;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S is = S(1) / static_cast<S>(
                            std::sqrt(static_cast<double>(var) + eps));
    mean[static_cast<size_t>(t)] = mu;
    invstd[static_cast<size_t>(t)] = is;
    S* orow = out.data() + t * d;
    for (int64_t i = 0; i < d; ++i)
      orow[i] = gv[static_cast<size_t>(i)] * (row[i] - mu) * is +
                bv[static_cast<size_t>(i)];
  }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  auto bw = [xn, gn, bn, tokens, d, mean, invstd](TensorNode<S>& o) {
    const bool need_x = xn->requires_grad;
    const bool need_g = gn->requires_grad;
    const bool need_b = bn->requires_grad;
    if (need_x) detail::ensure_grad(*xn);
    if (need_g) detail::ensure_grad(*gn);
    if (need_b) detail::ensure_grad(*bn);
    for (int64_t t = 0; t < tokens; ++t) {
      const S* row = xn->data.data() + t * d;
      const S* grow = o.grad.data() + t * d;
      const S mu = mean[static_cast<size_t>(t)];
      const S is = invstd[static_cast<size_t>(t)];
      S s1 = S(0), s2 = S(0);
      for (int64_t i = 0; i < d; ++i) {
        const S xh = (row[i] - mu) * is;
        const S dxh = grow[i] * gn->data[static_cast<size_t>(i)];
        s1 += dxh;
        s2 += dxh * xh;
        if (need_g) gn->grad[static_cast<size_t>(i)] += grow[i] * xh;
        if (need_b) bn->grad[static_cast<size_t>(i)] += grow[i];
      }
      if (need_x) {
        const S invd = S(1) / static_cast<S>(d);
        S* xg = xn->grad.data() + t * d;
        for (int64_t i = 0; i < d; ++i) {
          const S xh = (row[i] - mu) * is;
          const S dxh = grow[i] * gn->data[static_cast<size_t>(i)];
          xg[i] += is * (dxh - s1 * invd - xh * s2 * invd);
        }
      }
    }
  };
  return detail::make_result<S>(x.shape(), std::move(out), {x, gamma, beta},
                                std::move(bw), "layer_norm");
}

// ---------------------------------------------------------------------------
// dropout: train-mode Bernoulli mask scaled by 1/(1-p); eval-mode identity
// ---------------------------------------------------------------------------

enum class DropoutMode { train, eval };

template <class S>
Tensor<S> dropout(const Tensor<S>& x, double p, DropoutMode mode, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0, 1)");
  if (mode == DropoutMode::eval || p == 0.0) return x;
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  const auto& xv = x.values();
  std::vector<S> mask(xv.size());
  for (auto& m : mask) m = rng.bernoulli(p) ? S(0) : keep_scale;
  std::vector<S> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  auto xn = x.node();
  return detail::make_result<S>(
      x.shape(), std::move(out), {x},
      [xn, mask](TensorNode<S>& o) {
        detail::ensure_grad(*xn);
        for (size_t i = 0; i < o.grad.size(); ++i)
          xn->grad[i] += o.grad[i] * mask[i];
      },
      "dropout");
}

// ---------------------------------------------------------------------------
// Sequence ops on [..., n, d]
// ---------------------------------------------------------------------------

// Length-targeted average pooling; output row i averages input rows in
// [floor(i*n/m), ceil((i+1)*n/m)). Bins may overlap for non-divisible n.
template <class S>
Tensor<S> adaptive_avg_pool_seq(const Tensor<S>& x, int64_t m) {
  if (x.ndim() < 2) throw ShapeError("adaptive_avg_pool_seq: need >= 2 dims");
  const int64_t d = x.dim(-1);
  const int64_t n = x.dim(-2);
  if (m < 1 || m > n) {
    throw RangeError("adaptive_avg_pool_seq: target " + std::to_string(m) +
                     " out of range for length " + std::to_string(n));
  }
  const int64_t batch = x.numel() / (n * d);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = m;

  std::vector<int64_t> lo(static_cast<size_t>(m)), hi(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) {
    lo[static_cast<size_t>(i)] = (i * n) / m;
    hi[static_cast<size_t>(i)] = ((i + 1) * n + m - 1) / m;  // ceil
  }

  const auto& xv = x.values();
  std::vector<S> out(static_cast<size_t>(batch * m * d), S(0));
  for (int64_t b = 0; b < batch; ++b) {
    const S* src = xv.data() + b * n * d;
    S* dst = out.data() + b * m * d;
    for (int64_t i = 0; i < m; ++i) {
      const int64_t a = lo[static_cast<size_t>(i)];
      const int64_t e = hi[static_cast<size_t>(i)];
      const S inv = S(1) / static_cast<S>(e - a);
      for (int64_t t = a; t < e; ++t) {
        for (int64_t c = 0; c < d; ++c) dst[i * d + c] += src[t * d + c];
      }
      for (int64_t c = 0; c < d; ++c) dst[i * d + c] *= inv;
    }
  }

  auto xn = x.node();
  auto bw = [xn, batch, n, m, d, lo, hi](TensorNode<S>& o) {
    detail::ensure_grad(*xn);
    for (int64_t b = 0; b < batch; ++b) {
      const S* src = o.grad.data() + b * m * d;
      S* dst = xn->grad.data() + b * n * d;
      for (int64_t i = 0; i < m; ++i) {
        const int64_t a = lo[static_cast<size_t>(i)];
        const int64_t e = hi[static_cast<size_t>(i)];
        const S inv = S(1) / static_cast<S>(e - a);
        for (int64_t t = a; t < e; ++t) {
          for (int64_t c = 0; c < d; ++c)
            dst[t * d + c] += src[i * d + c] * inv;
        }
      }
    }
  };
  return detail::make_result<S>(std::move(out_shape), std::move(out), {x},
                                std::move(bw), "adaptive_avg_pool_seq");
}

// 1-D cross-correlation along the sequence axis with stride r.
// x [..., n, d], kernel [k, d, d'], bias [d'] -> [..., (n-k)/r + 1, d']
template <class S>
Tensor<S> strided_conv_seq(const Tensor<S>& x, const Tensor<S>& kernel,
                           const Tensor<S>& bias, int64_t r) {
  if (x.ndim() < 2 || kernel.ndim() != 3) {
    throw ShapeError("strided_conv_seq: x " + shape_str(x.shape()) +
                     ", kernel " + shape_str(kernel.shape()));
  }
  const int64_t d = x.dim(-1);
  const int64_t n = x.dim(-2);
  const int64_t k = kernel.dim(0);
  const int64_t dp = kernel.dim(2);
  if (kernel.dim(1) != d) {
    throw ShapeError("strided_conv_seq: kernel channels " +
                     shape_str(kernel.shape()) + " do not match input " +
                     shape_str(x.shape()));
  }
  if (bias.numel() != dp) throw ShapeError("strided_conv_seq: bias shape");
  if (k < 1 || r < 1) throw RangeError("strided_conv_seq: k, r must be >= 1");
  if (n < k) {
    throw RangeError("strided_conv_seq: length " + std::to_string(n) +
                     " shorter than kernel " + std::to_string(k));
  }
  const int64_t batch = x.numel() / (n * d);
  const int64_t T = (n - k) / r + 1;
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = T;
  out_shape[out_shape.size() - 1] = dp;

  using Mat =
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto& xv = x.values();
  const auto& kv = kernel.values();
  const auto& biv = bias.values();
  Eigen::Map<const Mat> K(kv.data(), k * d, dp);
  std::vector<S> out(static_cast<size_t>(batch * T * dp));
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < T; ++t) {
      Eigen::Map<const Mat> xrow(xv.data() + (b * n + t * r) * d, 1, k * d);
      Eigen::Map<Mat> orow(out.data() + (b * T + t) * dp, 1, dp);
      orow.noalias() = xrow * K;
      for (int64_t c = 0; c < dp; ++c) orow(0, c) += biv[static_cast<size_t>(c)];
    }
  }

  auto xn = x.node();
  auto kn = kernel.node();
  auto bn = bias.node();
  auto bw = [xn, kn, bn, batch, n, d, k, dp, r, T](TensorNode<S>& o) {
    const bool need_x = xn->requires_grad;
    const bool need_k = kn->requires_grad;
    const bool need_b = bn->requires_grad;
    if (need_x) detail::ensure_grad(*xn);
    if (need_k) detail::ensure_grad(*kn);
    if (need_b) detail::ensure_grad(*bn);
    Eigen::Map<const Mat> K(kn->data.data(), k * d, dp);
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t t = 0; t < T; ++t) {
        Eigen::Map<const Mat> g(o.grad.data() + (b * T + t) * dp, 1, dp);
        if (need_x) {
          Eigen::Map<Mat> dx(xn->grad.data() + (b * n + t * r) * d, 1, k * d);
          dx.noalias() += g * K.transpose();
        }
        if (need_k) {
          Eigen::Map<const Mat> xrow(xn->data.data() + (b * n + t * r) * d, 1,
                                     k * d);
          Eigen::Map<Mat> dK(kn->grad.data(), k * d, dp);
          dK.noalias() += xrow.transpose() * g;
        }
        if (need_b) {
          for (int64_t c = 0; c < dp; ++c)
            bn->grad[static_cast<size_t>(c)] += g(0, c);
        }
      }
    }
  };
  return detail::make_result<S>(std::move(out_shape), std::move(out),
                                {x, kernel, bias}, std::move(bw),
                                "strided_conv_seq");
}

// Fractionally strided (gradient-of-convolution) upsampling.
// x [..., n, d], kernel [k, d, d'], bias [d'] -> [..., (n-1)*r + k, d']
template <class S>
Tensor<S> transposed_conv_seq(const Tensor<S>& x, const Tensor<S>& kernel,
                              const Tensor<S>& bias, int64_t r) {
  if (x.ndim() < 2 || kernel.ndim() != 3) {
    throw ShapeError("transposed_conv_seq: x " + shape_str(x.shape()) +
                     ", kernel " + shape_str(kernel.shape()));
  }
  const int64_t d = x.dim(-1);
  const int64_t n = x.dim(-2);
  const int64_t k = kernel.dim(0);
  const int64_t dp = kernel.dim(2);
  if (kernel.dim(1) != d) {
    throw ShapeError("transposed_conv_seq: kernel channels " +
                     shape_str(kernel.shape()) + " do not match input " +
                     shape_str(x.shape()));
  }
  if (bias.numel() != dp) throw ShapeError("transposed_conv_seq: bias shape");
  if (k < 1 || r < 1)
    throw RangeError("transposed_conv_seq: k, r must be >= 1");
  const int64_t batch = x.numel() / (n * d);
  const int64_t T = (n - 1) * r + k;
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = T;
  out_shape[out_shape.size() - 1] = dp;

  using Mat =
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto& xv = x.values();
  const auto& kv = kernel.values();
  const auto& biv = bias.values();
  std::vector<S> out(static_cast<size_t>(batch * T * dp));
  for (int64_t b = 0; b < batch; ++b) {
    S* dst = out.data() + b * T * dp;
    for (int64_t j = 0; j < T; ++j)
      for (int64_t c = 0; c < dp; ++c)
        dst[j * dp + c] = biv[static_cast<size_t>(c)];
    for (int64_t t = 0; t < n; ++t) {
      Eigen::Map<const Mat> xrow(xv.data() + (b * n + t) * d, 1, d);
      for (int64_t kk = 0; kk < k; ++kk) {
        Eigen::Map<const Mat> Kslice(kv.data() + kk * d * dp, d, dp);
        Eigen::Map<Mat> orow(dst + (t * r + kk) * dp, 1, dp);
        orow.noalias() += xrow * Kslice;
      }
    }
  }

  auto xn = x.node();
  auto kn = kernel.node();
  auto bn = bias.node();
  auto bw = [xn, kn, bn, batch, n, d, k, dp, r, T](TensorNode<S>& o) {
    const bool need_x = xn->requires_grad;
    const bool need_k = kn->requires_grad;
    const bool need_b = bn->requires_grad;
    if (need_x) detail::ensure_grad(*xn);
    if (need_k) detail::ensure_grad(*kn);
    if (need_b) detail::ensure_grad(*bn);
    for (int64_t b = 0; b < batch; ++b) {
      const S* gbase = o.grad.data() + b * T * dp;
      if (need_b) {
        for (int64_t j = 0; j < T; ++j)
          for (int64_t c = 0; c < dp; ++c)
            bn->grad[static_cast<size_t>(c)] += gbase[j * dp + c];
      }
      for (int64_t t = 0; t < n; ++t) {
        for (int64_t kk = 0; kk < k; ++kk) {
          Eigen::Map<const Mat> g(gbase + (t * r + kk) * dp, 1, dp);
          Eigen::Map<const Mat> Kslice(kn->data.data() + kk * d * dp, d, dp);
          if (need_x) {
            Eigen::Map<Mat> dx(xn->grad.data() + (b * n + t) * d, 1, d);
            dx.noalias() += g * Kslice.transpose();
          }
          if (need_k) {
            Eigen::Map<const Mat> xrow(xn->data.data() + (b * n + t) * d, 1,
                                       d);
            Eigen::Map<Mat> dK(kn->grad.data() + kk * d * dp, d, dp);
            dK.noalias() += xrow.transpose() * g;
          }
        }
      }
    }
  };
  return detail::make_result<S>(std::move(out_shape), std::move(out),
                                {x, kernel, bias}, std::move(bw),
                                "transposed_conv_seq");
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Ordered record of the operations reachable from a root, sufficient to
// replay adjoints. Visits each recorded operation exactly once, in reverse
// execution order.
template <class S>
class GradTape {
 public:
  explicit GradTape(const Tensor<S>& root) : root_(root.node()) {
    if (!root_) throw UsageError("GradTape: empty tensor");
    std::unordered_set<const TensorNode<S>*> visited;
    std::vector<std::pair<std::shared_ptr<TensorNode<S>>, size_t>> stack;
    stack.emplace_back(root_, 0);
    visited.insert(root_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        std::shared_ptr<TensorNode<S>> p = node->parents[next++];
        if (visited.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  size_t op_count() const {
    size_t n = 0;
    for (const auto& nd : order_)
      if (nd->backward) ++n;
    return n;
  }

  // Seeds the root with grad 1, replays adjoints, then releases the graph.
  // Leaf gradients accumulate; interior buffers are freed as soon as their
  // adjoint has run.
  void run() {
    root_->grad.assign(root_->data.size(), S(1));
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      TensorNode<S>& nd = **it;
      if (nd.backward) {
        if (!nd.grad.empty()) nd.backward(nd);
        nd.backward = nullptr;
        nd.parents.clear();
        nd.grad.clear();
        nd.grad.shrink_to_fit();
      }
    }
  }

 private:
  std::shared_ptr<TensorNode<S>> root_;
  std::vector<std::shared_ptr<TensorNode<S>>> order_;
};

template <class S>
void backward(const Tensor<S>& loss) {
  if (!loss.valid() || loss.numel() != 1) {
    throw UsageError("backward: loss must be a scalar tensor");
  }
  GradTape<S> tape(loss);
  if (tape.op_count() == 0) {
    throw UsageError("backward: no recorded operations reachable from loss");
  }
  tape.run();
}

}  // namespace rtpca
