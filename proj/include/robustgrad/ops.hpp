#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <utility>

#include "robustgrad/kernels.hpp"
#include "robustgrad/tape.hpp"

// Differentiable primitives. Every adjoint rule is written in terms of these same
// primitives, so a backward pass recorded with create_graph can be differentiated again.
namespace robustgrad {

namespace detail {

template <Real T, class F>
Tensor<T> map(const Tensor<T>& x, F f) {
  Tensor<T> out(x.shape());
  const T* in = x.data().data();
  T* o = out.data().data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = f(in[i]);
  return out;
}

template <Real T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f) {
  if (a.shape() != b.shape()) throw ShapeMismatch(to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* o = out.data().data();
  for (std::size_t i = 0; i < a.size(); ++i) o[i] = f(pa[i], pb[i]);
  return out;
}

template <Real T>
Var<T> parent(Tape<T>& t, std::uint32_t self, std::size_t k) {
  return Var<T>(&t, t.parents(self)[k]);
}

template <Real T>
Var<T> self_var(Tape<T>& t, std::uint32_t self) {
  return Var<T>(&t, self);
}

}  // namespace detail

template <Real T>
Var<T> broadcast_to(const Var<T>& x, const Shape& shape);
template <Real T>
Var<T> sum_to(const Var<T>& x, const Shape& shape);

/// Broadcasts both operands to their common shape (no-op when equal).
template <Real T>
std::pair<Var<T>, Var<T>> align(const Var<T>& a, const Var<T>& b) {
  if (a.shape() == b.shape()) return {a, b};
  const Shape s = broadcast_shapes(a.shape(), b.shape());
  return {broadcast_to(a, s), broadcast_to(b, s)};
}

template <Real T>
Var<T> neg(const Var<T>& a) {
  return a.tape().record(detail::map(a.value(), [](T v) { return -v; }), {a},
                         [](Tape<T>&, std::uint32_t, const Var<T>& g, auto, auto out) { out[0] = neg(g); });
}

template <Real T>
Var<T> add(const Var<T>& a0, const Var<T>& b0) {
  auto [a, b] = align(a0, b0);
  return a.tape().record(detail::zip(a.value(), b.value(), std::plus<T>()), {a, b},
                         [](Tape<T>&, std::uint32_t, const Var<T>& g, auto, auto out) {
                           out[0] = g;
                           out[1] = g;
                         });
}

template <Real T>
Var<T> sub(const Var<T>& a0, const Var<T>& b0) {
  auto [a, b] = align(a0, b0);
  return a.tape().record(detail::zip(a.value(), b.value(), std::minus<T>()), {a, b},
                         [](Tape<T>&, std::uint32_t, const Var<T>& g, auto need, auto out) {
                           out[0] = g;
                           if (need[1]) out[1] = neg(g);
                         });
}

template <Real T>
Var<T> mul(const Var<T>& a0, const Var<T>& b0) {
  auto [a, b] = align(a0, b0);
  return a.tape().record(detail::zip(a.value(), b.value(), std::multiplies<T>()), {a, b},
                         [](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto need, auto out) {
                           if (need[0]) out[0] = mul(g, detail::parent(t, self, 1));
                           if (need[1]) out[1] = mul(g, detail::parent(t, self, 0));
                         });
}

template <Real T>
Var<T> div(const Var<T>& a0, const Var<T>& b0) {
  auto [a, b] = align(a0, b0);
  return a.tape().record(detail::zip(a.value(), b.value(), std::divides<T>()), {a, b},
                         [](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto need, auto out) {
                           const auto b = detail::parent(t, self, 1);
                           if (need[0]) out[0] = div(g, b);
                           if (need[1]) out[1] = neg(mul(g, div(detail::self_var(t, self), b)));
                         });
}

/// x * c for a compile-free scalar constant.
template <Real T>
Var<T> scale(const Var<T>& a, T c) {
  return a.tape().record(detail::map(a.value(), [c](T v) { return v * c; }), {a},
                         [c](Tape<T>&, std::uint32_t, const Var<T>& g, auto, auto out) { out[0] = scale(g, c); });
}

/// x + c for a scalar constant.
template <Real T>
Var<T> shift(const Var<T>& a, T c) {
  return a.tape().record(detail::map(a.value(), [c](T v) { return v + c; }), {a},
                         [](Tape<T>&, std::uint32_t, const Var<T>& g, auto, auto out) { out[0] = g; });
}

template <Real T>
Var<T> exp(const Var<T>& a) {
  return a.tape().record(detail::map(a.value(), [](T v) { return std::exp(v); }), {a},
                         [](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto, auto out) {
                           out[0] = mul(g, detail::self_var(t, self));
                         });
}

template <Real T>
Var<T> log(const Var<T>& a) {
  return a.tape().record(detail::map(a.value(), [](T v) { return std::log(v); }), {a},
                         [](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto, auto out) {
                           out[0] = div(g, detail::parent(t, self, 0));
                         });
}

template <Real T>
Var<T> tanh(const Var<T>& a) {
  return a.tape().record(detail::map(a.value(), [](T v) { return std::tanh(v); }), {a},
                         [](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto, auto out) {
                           const auto y = detail::self_var(t, self);
                           out[0] = mul(g, shift(neg(mul(y, y)), T(1)));
                         });
}

template <Real T>
Var<T> erf(const Var<T>& a) {
  return a.tape().record(detail::map(a.value(), [](T v) { return std::erf(v); }), {a},
                         [](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto, auto out) {
                           const auto x = detail::parent(t, self, 0);
                           const T c = T(2) / std::sqrt(std::numbers::pi_v<T>);
                           out[0] = mul(g, scale(exp(neg(mul(x, x))), c));
                         });
}

template <Real T>
Var<T> sqrt(const Var<T>& a) {
  return a.tape().record(detail::map(a.value(), [](T v) { return std::sqrt(v); }), {a},
                         [](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto, auto out) {
                           out[0] = div(g, scale(detail::self_var(t, self), T(2)));
                         });
}

/// Elementwise sign with sign(0) = 0. Its derivative is zero everywhere.
template <Real T>
Var<T> sign(const Var<T>& a) {
  return a.tape().constant(detail::map(a.value(), [](T v) { return T((v > 0) - (v < 0)); }));
}

/// |x|, with subgradient 0 chosen at x = 0.
template <Real T>
Var<T> abs(const Var<T>& a) {
  return a.tape().record(detail::map(a.value(), [](T v) { return std::abs(v); }), {a},
                         [](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto, auto out) {
                           out[0] = mul(g, sign(detail::parent(t, self, 0)));
                         });
}

/// x^p for a scalar exponent.
template <Real T>
Var<T> pow(const Var<T>& a, T p) {
  return a.tape().record(detail::map(a.value(), [p](T v) { return std::pow(v, p); }), {a},
                         [p](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto, auto out) {
                           if (p == T(0)) return;
                           out[0] = mul(g, scale(pow(detail::parent(t, self, 0), p - T(1)), p));
                         });
}

namespace detail {

template <Real T>
Var<T> select_mask(const Var<T>& g, const Tensor<T>& mask) {
  return mul(g, g.tape().constant(mask));
}

}  // namespace detail

/// Elementwise maximum; ties route the gradient to the first operand.
template <Real T>
Var<T> maximum(const Var<T>& a0, const Var<T>& b0) {
  auto [a, b] = align(a0, b0);
  return a.tape().record(detail::zip(a.value(), b.value(), [](T x, T y) { return x >= y ? x : y; }), {a, b},
                         [](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto need, auto out) {
                           const auto& av = detail::parent(t, self, 0).value();
                           const auto& bv = detail::parent(t, self, 1).value();
                           const auto first = detail::zip(av, bv, [](T x, T y) { return T(x >= y); });
                           if (need[0]) out[0] = detail::select_mask(g, first);
                           if (need[1]) out[1] = detail::select_mask(g, detail::map(first, [](T m) { return T(1) - m; }));
                         });
}

/// Elementwise minimum; ties route the gradient to the first operand.
template <Real T>
Var<T> minimum(const Var<T>& a0, const Var<T>& b0) {
  auto [a, b] = align(a0, b0);
  return a.tape().record(detail::zip(a.value(), b.value(), [](T x, T y) { return x <= y ? x : y; }), {a, b},
                         [](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto need, auto out) {
                           const auto& av = detail::parent(t, self, 0).value();
                           const auto& bv = detail::parent(t, self, 1).value();
                           const auto first = detail::zip(av, bv, [](T x, T y) { return T(x <= y); });
                           if (need[0]) out[0] = detail::select_mask(g, first);
                           if (need[1]) out[1] = detail::select_mask(g, detail::map(first, [](T m) { return T(1) - m; }));
                         });
}

template <Real T>
Var<T> reshape(const Var<T>& a, const Shape& shape) {
  const Shape from = a.shape();
  return a.tape().record(a.value().reshaped(shape), {a},
                         [from](Tape<T>&, std::uint32_t, const Var<T>& g, auto, auto out) { out[0] = reshape(g, from); });
}

template <Real T>
Var<T> broadcast_to(const Var<T>& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  const Shape from = a.shape();
  return a.tape().record(kernels::broadcast_to(a.value(), shape), {a},
                         [from](Tape<T>&, std::uint32_t, const Var<T>& g, auto, auto out) { out[0] = sum_to(g, from); });
}

template <Real T>
Var<T> sum_to(const Var<T>& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  const Shape from = a.shape();
  return a.tape().record(kernels::sum_to(a.value(), shape), {a},
                         [from](Tape<T>&, std::uint32_t, const Var<T>& g, auto, auto out) { out[0] = broadcast_to(g, from); });
}

/// Sum of all elements as a rank-0 tensor.
template <Real T>
Var<T> sum(const Var<T>& a) {
  return sum_to(a, Shape{});
}

template <Real T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Sums over `axis`, keeping it with extent 1.
template <Real T>
Var<T> sum_axis(const Var<T>& a, std::size_t axis) {
  Shape s = a.shape();
  s.at(axis) = 1;
  return sum_to(a, s);
}

template <Real T>
Var<T> unslice(const Var<T>& g, std::size_t axis, std::size_t start, std::size_t full);

template <Real T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  const std::size_t full = a.shape().at(axis);
  return a.tape().record(kernels::slice(a.value(), axis, start, len), {a},
                         [axis, start, full](Tape<T>&, std::uint32_t, const Var<T>& g, auto, auto out) {
                           out[0] = unslice(g, axis, start, full);
                         });
}

template <Real T>
Var<T> unslice(const Var<T>& a, std::size_t axis, std::size_t start, std::size_t full) {
  const std::size_t len = a.shape().at(axis);
  return a.tape().record(kernels::unslice(a.value(), axis, start, full), {a},
                         [axis, start, len](Tape<T>&, std::uint32_t, const Var<T>& g, auto, auto out) {
                           out[0] = slice(g, axis, start, len);
                         });
}

namespace detail {

template <Real T, class Better>
std::pair<Tensor<T>, Tensor<T>> arg_reduce(const Tensor<T>& x, std::size_t axis, Better better) {
  if (axis >= x.rank()) throw ShapeMismatch("reduction axis out of range");
  Shape s = x.shape();
  const std::size_t len = s[axis];
  s[axis] = 1;
  const std::size_t outer = numel(Shape(x.shape().begin(), x.shape().begin() + static_cast<long>(axis)));
  const std::size_t inner = numel(Shape(x.shape().begin() + static_cast<long>(axis) + 1, x.shape().end()));
  Tensor<T> val(s);
  Tensor<T> mask(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < len; ++k) {
        if (better(x[(o * len + k) * inner + i], x[(o * len + best) * inner + i])) best = k;
      }
      val[o * inner + i] = x[(o * len + best) * inner + i];
      mask[(o * len + best) * inner + i] = T(1);
    }
  return {std::move(val), std::move(mask)};
}

template <Real T, class Better>
Var<T> reduce_extreme(const Var<T>& a, std::size_t axis, Better better) {
  auto [val, mask] = arg_reduce(a.value(), axis, better);
  return a.tape().record(std::move(val), {a},
                         [mask = std::move(mask)](Tape<T>&, std::uint32_t, const Var<T>& g, auto, auto out) {
                           out[0] = select_mask(broadcast_to(g, mask.shape()), mask);
                         });
}

}  // namespace detail

/// Maximum along `axis` (kept with extent 1). The gradient flows to the first maximizer.
template <Real T>
Var<T> max_axis(const Var<T>& a, std::size_t axis) {
  return detail::reduce_extreme(a, axis, std::greater<T>());
}

template <Real T>
Var<T> min_axis(const Var<T>& a, std::size_t axis) {
  return detail::reduce_extreme(a, axis, std::less<T>());
}

/// op(a) x op(b) for rank-2 operands.
template <Real T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta = false, bool tb = false) {
  return a.tape().record(kernels::matmul(a.value(), b.value(), ta, tb), {a, b},
                         [ta, tb](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto need, auto out) {
                           const auto A = detail::parent(t, self, 0);
                           const auto B = detail::parent(t, self, 1);
                           if (!ta && !tb) {
                             if (need[0]) out[0] = matmul(g, B, false, true);
                             if (need[1]) out[1] = matmul(A, g, true, false);
                           } else if (!ta && tb) {
                             if (need[0]) out[0] = matmul(g, B, false, false);
                             if (need[1]) out[1] = matmul(g, A, true, false);
                           } else if (ta && !tb) {
                             if (need[0]) out[0] = matmul(B, g, false, true);
                             if (need[1]) out[1] = matmul(A, g, false, false);
                           } else {
                             if (need[0]) out[0] = matmul(B, g, true, true);
                             if (need[1]) out[1] = matmul(g, A, true, true);
                           }
                         });
}

template <Real T>
Var<T> conv2d_input_grad(const Var<T>& g, const Var<T>& w, std::size_t pad, const Shape& x_shape);
template <Real T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& g, std::size_t pad, const Shape& w_shape);

/// Stride-1 2-D cross-correlation, x[N,C,H,W] with w[O,C,KH,KW], zero padding `pad`.
template <Real T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::size_t pad) {
  return x.tape().record(kernels::conv2d(x.value(), w.value(), pad), {x, w},
                         [pad](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto need, auto out) {
                           const auto X = detail::parent(t, self, 0);
                           const auto W = detail::parent(t, self, 1);
                           if (need[0]) out[0] = conv2d_input_grad(g, W, pad, X.shape());
                           if (need[1]) out[1] = conv2d_weight_grad(X, g, pad, W.shape());
                         });
}

template <Real T>
Var<T> conv2d_input_grad(const Var<T>& g, const Var<T>& w, std::size_t pad, const Shape& x_shape) {
  return g.tape().record(kernels::conv2d_input_grad(g.value(), w.value(), pad, x_shape), {g, w},
                         [pad](Tape<T>& t, std::uint32_t self, const Var<T>& h, auto need, auto out) {
                           const auto G = detail::parent(t, self, 0);
                           const auto W = detail::parent(t, self, 1);
                           if (need[0]) out[0] = conv2d(h, W, pad);
                           if (need[1]) out[1] = conv2d_weight_grad(h, G, pad, W.shape());
                         });
}

template <Real T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& g, std::size_t pad, const Shape& w_shape) {
  return x.tape().record(kernels::conv2d_weight_grad(x.value(), g.value(), pad, w_shape), {x, g},
                         [pad](Tape<T>& t, std::uint32_t self, const Var<T>& h, auto need, auto out) {
                           const auto X = detail::parent(t, self, 0);
                           const auto G = detail::parent(t, self, 1);
                           if (need[0]) out[0] = conv2d_input_grad(G, h, pad, X.shape());
                           if (need[1]) out[1] = conv2d(X, h, pad);
                         });
}

template <Real T>
Var<T> avg_unpool2d(const Var<T>& g, std::size_t k);

/// Non-overlapping k x k average pooling over the last two axes.
template <Real T>
Var<T> avg_pool2d(const Var<T>& x, std::size_t k) {
  return x.tape().record(kernels::avg_pool2d(x.value(), k), {x},
                         [k](Tape<T>&, std::uint32_t, const Var<T>& g, auto, auto out) { out[0] = avg_unpool2d(g, k); });
}

template <Real T>
Var<T> avg_unpool2d(const Var<T>& g, std::size_t k) {
  return g.tape().record(kernels::avg_unpool2d(g.value(), k), {g},
                         [k](Tape<T>&, std::uint32_t, const Var<T>& h, auto, auto out) { out[0] = avg_pool2d(h, k); });
}

namespace detail {

template <Real T>
Tensor<T> softmax_rows(const Tensor<T>& x, bool log_space) {
  if (x.rank() == 0) throw ShapeMismatch("softmax of a scalar");
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.size() / k;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * k;
    T* o = out.data().data() + r * k;
    T m = in[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, in[j]);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(in[j] - m);
    if (log_space) {
      const T lse = m + std::log(s);
      for (std::size_t j = 0; j < k; ++j) o[j] = in[j] - lse;
    } else {
      for (std::size_t j = 0; j < k; ++j) o[j] = std::exp(in[j] - m) / s;
    }
  }
  return out;
}

template <Real T>
Shape last_axis_collapsed(const Shape& s) {
  Shape r = s;
  r.back() = 1;
  return r;
}

}  // namespace detail

/// Softmax over the last axis.
template <Real T>
Var<T> softmax(const Var<T>& x) {
  return x.tape().record(detail::softmax_rows(x.value(), false), {x},
                         [](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto, auto out) {
                           const auto y = detail::self_var(t, self);
                           const Shape s = y.shape();
                           const auto dot = broadcast_to(sum_to(mul(g, y), detail::last_axis_collapsed<T>(s)), s);
                           out[0] = mul(y, sub(g, dot));
                         });
}

/// Log-softmax over the last axis.
template <Real T>
Var<T> log_softmax(const Var<T>& x) {
  return x.tape().record(detail::softmax_rows(x.value(), true), {x},
                         [](Tape<T>& t, std::uint32_t self, const Var<T>& g, auto, auto out) {
                           const auto X = detail::parent(t, self, 0);
                           const Shape s = X.shape();
                           const auto total = broadcast_to(sum_to(g, detail::last_axis_collapsed<T>(s)), s);
                           out[0] = sub(g, mul(softmax(X), total));
                         });
}

template <Real T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <Real T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <Real T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <Real T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }
template <Real T>
Var<T> operator-(const Var<T>& a) { return neg(a); }
template <Real T>
Var<T> operator*(const Var<T>& a, T c) { return scale(a, c); }
template <Real T>
Var<T> operator*(T c, const Var<T>& a) { return scale(a, c); }
template <Real T>
Var<T> operator+(const Var<T>& a, T c) { return shift(a, c); }
template <Real T>
Var<T> operator-(const Var<T>& a, T c) { return shift(a, -c); }

}  // namespace robustgrad
