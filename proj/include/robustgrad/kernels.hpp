#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "robustgrad/errors.hpp"
#include "robustgrad/tensor.hpp"

// Raw tensor kernels with no autodiff bookkeeping. Convolutions are stride-1
// cross-correlations with symmetric zero padding, NCHW activations and OIHW weights.
namespace robustgrad::kernels {

struct ConvGeometry {
  std::size_t n, c, h, w;     // input
  std::size_t o, kh, kw;      // weight
  std::size_t pad;
  std::size_t oh, ow;         // output

  static ConvGeometry of(const Shape& x, const Shape& wt, std::size_t pad) {
    if (x.size() != 4 || wt.size() != 4 || x[1] != wt[1]) {
      throw ShapeMismatch("conv2d input " + to_string(x) + " weight " + to_string(wt));
    }
    if (x[2] + 2 * pad < wt[2] || x[3] + 2 * pad < wt[3]) {
      throw ShapeMismatch("conv2d kernel larger than padded input");
    }
    return {x[0], x[1], x[2], x[3], wt[0], wt[2], wt[3], pad, x[2] + 2 * pad - wt[2] + 1, x[3] + 2 * pad - wt[3] + 1};
  }

  // Output columns j with 0 <= j + b - pad < w.
  std::size_t col_lo(std::size_t b) const { return b >= pad ? 0 : pad - b; }
  std::size_t col_hi(std::size_t b) const { return std::min(ow, w + pad - b); }
  std::size_t row_lo(std::size_t a) const { return a >= pad ? 0 : pad - a; }
  std::size_t row_hi(std::size_t a) const { return std::min(oh, h + pad - a); }
};

template <Real T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& wt, std::size_t pad) {
  const auto g = ConvGeometry::of(x.shape(), wt.shape(), pad);
  Tensor<T> out({g.n, g.o, g.oh, g.ow});
  const T* xp = x.data().data();
  const T* wp = wt.data().data();
  T* op = out.data().data();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      T* oplane = op + (n * g.o + o) * g.oh * g.ow;
      for (std::size_t c = 0; c < g.c; ++c) {
        const T* xplane = xp + (n * g.c + c) * g.h * g.w;
        for (std::size_t a = 0; a < g.kh; ++a)
          for (std::size_t b = 0; b < g.kw; ++b) {
            const T wv = wp[((o * g.c + c) * g.kh + a) * g.kw + b];
            const std::size_t j0 = g.col_lo(b), j1 = g.col_hi(b);
            for (std::size_t i = g.row_lo(a); i < g.row_hi(a); ++i) {
              T* orow = oplane + i * g.ow + j0;
              const T* xrow = xplane + (i + a - pad) * g.w + (j0 + b - pad);
              for (std::size_t j = 0; j < j1 - j0; ++j) orow[j] += wv * xrow[j];
            }
          }
      }
    }
  return out;
}

/// Adjoint of conv2d with respect to its input.
template <Real T>
Tensor<T> conv2d_input_grad(const Tensor<T>& gout, const Tensor<T>& wt, std::size_t pad, const Shape& x_shape) {
  const auto g = ConvGeometry::of(x_shape, wt.shape(), pad);
  if (gout.shape() != Shape{g.n, g.o, g.oh, g.ow}) throw ShapeMismatch("conv2d_input_grad upstream " + to_string(gout.shape()));
  Tensor<T> gx(x_shape);
  const T* gp = gout.data().data();
  const T* wp = wt.data().data();
  T* xp = gx.data().data();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      const T* gplane = gp + (n * g.o + o) * g.oh * g.ow;
      for (std::size_t c = 0; c < g.c; ++c) {
        T* xplane = xp + (n * g.c + c) * g.h * g.w;
        for (std::size_t a = 0; a < g.kh; ++a)
          for (std::size_t b = 0; b < g.kw; ++b) {
            const T wv = wp[((o * g.c + c) * g.kh + a) * g.kw + b];
            const std::size_t j0 = g.col_lo(b), j1 = g.col_hi(b);
            for (std::size_t i = g.row_lo(a); i < g.row_hi(a); ++i) {
              const T* grow = gplane + i * g.ow + j0;
              T* xrow = xplane + (i + a - pad) * g.w + (j0 + b - pad);
              for (std::size_t j = 0; j < j1 - j0; ++j) xrow[j] += wv * grow[j];
            }
          }
      }
    }
  return gx;
}

/// Adjoint of conv2d with respect to its weight.
template <Real T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& gout, std::size_t pad, const Shape& w_shape) {
  const auto g = ConvGeometry::of(x.shape(), w_shape, pad);
  if (gout.shape() != Shape{g.n, g.o, g.oh, g.ow}) throw ShapeMismatch("conv2d_weight_grad upstream " + to_string(gout.shape()));
  Tensor<T> gw(w_shape);
  const T* gp = gout.data().data();
  const T* xp = x.data().data();
  T* wp = gw.data().data();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      const T* gplane = gp + (n * g.o + o) * g.oh * g.ow;
      for (std::size_t c = 0; c < g.c; ++c) {
        const T* xplane = xp + (n * g.c + c) * g.h * g.w;
        for (std::size_t a = 0; a < g.kh; ++a)
          for (std::size_t b = 0; b < g.kw; ++b) {
            T acc = 0;
            const std::size_t j0 = g.col_lo(b), j1 = g.col_hi(b);
            for (std::size_t i = g.row_lo(a); i < g.row_hi(a); ++i) {
              const T* grow = gplane + i * g.ow + j0;
              const T* xrow = xplane + (i + a - pad) * g.w + (j0 + b - pad);
              for (std::size_t j = 0; j < j1 - j0; ++j) acc += grow[j] * xrow[j];
            }
            wp[((o * g.c + c) * g.kh + a) * g.kw + b] += acc;
          }
      }
    }
  return gw;
}

/// C = op(A) op(B) for rank-2 operands, op = transpose when the flag is set.
template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeMismatch("matmul needs rank-2 operands");
  const std::size_t m = ta ? a.dim(1) : a.dim(0);
  const std::size_t k = ta ? a.dim(0) : a.dim(1);
  const std::size_t kb = tb ? b.dim(1) : b.dim(0);
  const std::size_t n = tb ? b.dim(0) : b.dim(1);
  if (k != kb) throw ShapeMismatch("matmul " + to_string(a.shape()) + (ta ? "^T" : "") + " x " + to_string(b.shape()) + (tb ? "^T" : ""));
  Tensor<T> out({m, n});
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* cp = out.data().data();
  const std::size_t lda = a.dim(1), ldb = b.dim(1);
  if (!tb) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = cp + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ta ? ap[p * lda + i] : ap[i * lda + p];
        const T* brow = bp + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = bp + j * ldb;
        T acc = 0;
        if (!ta) {
          const T* arow = ap + i * lda;
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        } else {
          for (std::size_t p = 0; p < k; ++p) acc += ap[p * lda + i] * brow[p];
        }
        cp[i * n + j] = acc;
      }
  }
  return out;
}

template <Real T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
  if (x.rank() != 4 || k == 0 || x.dim(2) % k || x.dim(3) % k) {
    throw ShapeMismatch("avg_pool2d of " + to_string(x.shape()) + " with window " + std::to_string(k));
  }
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / k, ow = w / k;
  Tensor<T> out({x.dim(0), x.dim(1), oh, ow});
  const T scale = T(1) / static_cast<T>(k * k);
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out[(p * oh + i / k) * ow + j / k] += x[(p * h + i) * w + j];
  for (auto& v : out.data()) v *= scale;
  return out;
}

/// Adjoint of avg_pool2d: spreads each value uniformly over its window.
template <Real T>
Tensor<T> avg_unpool2d(const Tensor<T>& g, std::size_t k) {
  if (g.rank() != 4 || k == 0) throw ShapeMismatch("avg_unpool2d of " + to_string(g.shape()));
  const std::size_t nc = g.dim(0) * g.dim(1), oh = g.dim(2), ow = g.dim(3), h = oh * k, w = ow * k;
  Tensor<T> out({g.dim(0), g.dim(1), h, w});
  const T scale = T(1) / static_cast<T>(k * k);
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out[(p * h + i) * w + j] = g[(p * oh + i / k) * ow + j / k] * scale;
  return out;
}

/// Left-pads `shape` with ones to rank `r`.
inline Shape align_rank(const Shape& shape, std::size_t r) {
  Shape out(r - shape.size(), 1);
  out.insert(out.end(), shape.begin(), shape.end());
  return out;
}

template <Real T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (x.rank() > shape.size()) throw ShapeMismatch("broadcast " + to_string(x.shape()) + " -> " + to_string(shape));
  const Shape src = align_rank(x.shape(), shape.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] != shape[i] && src[i] != 1) throw ShapeMismatch("broadcast " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  Tensor<T> out(shape);
  if (x.size() == 1) {
    std::fill(out.data().begin(), out.data().end(), x[0]);
    return out;
  }
  const auto sstr = strides_of(src);
  const auto ostr = strides_of(shape);
  const std::size_t r = shape.size();
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    std::size_t rem = flat, off = 0;
    for (std::size_t d = 0; d < r; ++d) {
      idx[d] = rem / ostr[d];
      rem %= ostr[d];
      if (src[d] != 1) off += idx[d] * sstr[d];
    }
    out[flat] = x[off];
  }
  return out;
}

/// Sums `x` down to `shape`, the adjoint of broadcast_to.
template <Real T>
Tensor<T> sum_to(const Tensor<T>& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (shape.size() > x.rank()) throw ShapeMismatch("sum_to " + to_string(x.shape()) + " -> " + to_string(shape));
  const Shape dst = align_rank(shape, x.rank());
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i] != x.dim(i) && dst[i] != 1) throw ShapeMismatch("sum_to " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  Tensor<T> out(shape);
  if (numel(shape) == 1) {
    T acc = 0;
    for (T v : x.data()) acc += v;
    out[0] = acc;
    return out;
  }
  const auto dstr = strides_of(dst);
  const auto xstr = strides_of(x.shape());
  const std::size_t r = x.rank();
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    std::size_t rem = flat, off = 0;
    for (std::size_t d = 0; d < r; ++d) {
      const std::size_t id = rem / xstr[d];
      rem %= xstr[d];
      if (dst[d] != 1) off += id * dstr[d];
    }
    out[off] += x[flat];
  }
  return out;
}

/// Contiguous sub-range [start, start+len) along `axis`.
template <Real T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.rank() || start + len > x.dim(axis)) throw ShapeMismatch("slice out of range for " + to_string(x.shape()));
  Shape shape = x.shape();
  shape[axis] = len;
  const std::size_t outer = numel(Shape(x.shape().begin(), x.shape().begin() + static_cast<long>(axis)));
  const std::size_t inner = numel(Shape(x.shape().begin() + static_cast<long>(axis) + 1, x.shape().end()));
  Tensor<T> out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    const T* src = x.data().data() + (o * x.dim(axis) + start) * inner;
    std::copy(src, src + len * inner, out.data().data() + o * len * inner);
  }
  return out;
}

/// Adjoint of slice: embeds `g` into zeros of extent `full` along `axis`.
template <Real T>
Tensor<T> unslice(const Tensor<T>& g, std::size_t axis, std::size_t start, std::size_t full) {
  Shape shape = g.shape();
  const std::size_t len = shape.at(axis);
  if (start + len > full) throw ShapeMismatch("unslice out of range");
  shape[axis] = full;
  const std::size_t outer = numel(Shape(shape.begin(), shape.begin() + static_cast<long>(axis)));
  const std::size_t inner = numel(Shape(shape.begin() + static_cast<long>(axis) + 1, shape.end()));
  Tensor<T> out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    const T* src = g.data().data() + o * len * inner;
    std::copy(src, src + len * inner, out.data().data() + (o * full + start) * inner);
  }
  return out;
}

}  // namespace robustgrad::kernels
