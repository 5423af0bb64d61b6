#pragma once

// Procedural datasets. All pixel values are produced with integer arithmetic on a 0..255
// canvas, so the same seed gives the same bytes everywhere.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "robustgrad/data/dataset.hpp"
#include "robustgrad/rng.hpp"

namespace robustgrad {

enum class SyntheticKind { edge_shapes, gaussian_blobs };

inline std::optional<SyntheticKind> parse_synthetic_kind(std::string_view s) {
  if (s == "edge-shapes") return SyntheticKind::edge_shapes;
  if (s == "gaussian-blobs") return SyntheticKind::gaussian_blobs;
  return std::nullopt;
}

inline std::string_view synthetic_kind_name(SyntheticKind k) {
  return k == SyntheticKind::edge_shapes ? "edge-shapes" : "gaussian-blobs";
}

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::edge_shapes;
  std::size_t num_classes = 10;
  std::size_t image_size = 16;
  std::size_t samples = 1000;
  std::uint64_t seed = 0;
  int noise = 24;  // max per-pixel additive noise, in 1/255 units
  int stroke_min = 180;
  int stroke_max = 255;
};

/// Number of distinct shapes the edge-shapes generator can draw.
inline constexpr std::size_t kEdgeShapeClasses = 10;

namespace detail {

class Canvas {
 public:
  explicit Canvas(int size) : n_(size), px_(static_cast<std::size_t>(size * size), 0) {}

  int size() const noexcept { return n_; }
  int& at(int i, int j) { return px_[static_cast<std::size_t>(i * n_ + j)]; }
  int at(int i, int j) const { return px_[static_cast<std::size_t>(i * n_ + j)]; }

  /// Square brush of half-width w centred on (i, j); keeps the brighter value.
  void stamp(int i, int j, int w, int v) {
    for (int a = i - w; a <= i + w; ++a)
      for (int b = j - w; b <= j + w; ++b)
        if (a >= 0 && b >= 0 && a < n_ && b < n_) at(a, b) = std::max(at(a, b), v);
  }

  /// Bresenham segment from (i0, j0) to (i1, j1) in row/column coordinates.
  void line(int i0, int j0, int i1, int j1, int w, int v) {
    const int di = std::abs(i1 - i0), dj = std::abs(j1 - j0);
    const int si = i0 < i1 ? 1 : -1, sj = j0 < j1 ? 1 : -1;
    int err = dj - di;
    for (;;) {
      stamp(i0, j0, w, v);
      if (i0 == i1 && j0 == j1) break;
      const int e2 = 2 * err;
      if (e2 > -di) {
        err -= di;
        j0 += sj;
      }
      if (e2 < dj) {
        err += dj;
        i0 += si;
      }
    }
  }

  /// Midpoint circle outline.
  void ring(int ci, int cj, int r, int w, int v) {
    int x = r, y = 0, err = 1 - r;
    while (x >= y) {
      for (auto [a, b] : {std::pair{x, y}, {y, x}, {-y, x}, {-x, y}, {-x, -y}, {-y, -x}, {y, -x}, {x, -y}})
        stamp(ci + a, cj + b, w, v);
      ++y;
      if (err < 0) {
        err += 2 * y + 1;
      } else {
        --x;
        err += 2 * (y - x) + 1;
      }
    }
  }

 private:
  int n_;
  std::vector<int> px_;
};

inline int rand_int(Rng& rng, int lo, int hi) {
  return static_cast<int>(rng.between(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

/// Smooth background: base level plus an integer linear ramp.
inline void fill_background(Canvas& c, Rng& rng) {
  const int n = c.size();
  const int base = rand_int(rng, 0, 40);
  const int gi = rand_int(rng, -30, 30), gj = rand_int(rng, -30, 30);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) c.at(i, j) = std::clamp(base + (gi * (2 * i - n) + gj * (2 * j - n)) / (2 * n), 0, 70);
}

inline void add_noise(Canvas& c, Rng& rng, int noise) {
  if (noise <= 0) return;
  const int n = c.size();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) c.at(i, j) = std::clamp(c.at(i, j) + rand_int(rng, -noise, noise), 0, 255);
}

inline void draw_shape(Canvas& c, std::size_t cls, int ci, int cj, int r, int w, int v) {
  switch (cls) {
    case 0: c.line(ci, cj - r, ci, cj + r, w, v); break;                  // horizontal bar
    case 1: c.line(ci - r, cj, ci + r, cj, w, v); break;                  // vertical bar
    case 2: c.line(ci - r, cj - r, ci + r, cj + r, w, v); break;          // diagonal
    case 3: c.line(ci - r, cj + r, ci + r, cj - r, w, v); break;          // anti-diagonal
    case 4:                                                               // square outline
      c.line(ci - r, cj - r, ci - r, cj + r, w, v);
      c.line(ci + r, cj - r, ci + r, cj + r, w, v);
      c.line(ci - r, cj - r, ci + r, cj - r, w, v);
      c.line(ci - r, cj + r, ci + r, cj + r, w, v);
      break;
    case 5:  // plus
      c.line(ci, cj - r, ci, cj + r, w, v);
      c.line(ci - r, cj, ci + r, cj, w, v);
      break;
    case 6:  // cross
      c.line(ci - r, cj - r, ci + r, cj + r, w, v);
      c.line(ci - r, cj + r, ci + r, cj - r, w, v);
      break;
    case 7:  // L
      c.line(ci - r, cj - r, ci + r, cj - r, w, v);
      c.line(ci + r, cj - r, ci + r, cj + r, w, v);
      break;
    case 8:  // T
      c.line(ci - r, cj - r, ci - r, cj + r, w, v);
      c.line(ci - r, cj, ci + r, cj, w, v);
      break;
    case 9: c.ring(ci, cj, r, w, v); break;
    default: throw Error("edge-shapes has no class " + std::to_string(cls));
  }
}

template <Real T>
Dataset<T> edge_shapes(const SyntheticSpec& spec) {
  if (spec.num_classes < 2 || spec.num_classes > kEdgeShapeClasses) {
    throw Error("edge-shapes supports 2.." + std::to_string(kEdgeShapeClasses) + " classes");
  }
  if (spec.image_size < 8) throw Error("edge-shapes needs image_size >= 8");
  if (spec.stroke_min < 0 || spec.stroke_min > spec.stroke_max || spec.stroke_max > 255) {
    throw Error("stroke intensity range must satisfy 0 <= min <= max <= 255");
  }
  const int n = static_cast<int>(spec.image_size);
  Dataset<T> d;
  d.images = Tensor<T>({spec.samples, 1, spec.image_size, spec.image_size});
  d.labels.resize(spec.samples);
  const int w = n >= 24 ? 1 : 0;
  for (std::size_t s = 0; s < spec.samples; ++s) {
    Rng rng = Rng::derive(spec.seed, s);
    const std::size_t cls = s % spec.num_classes;
    Canvas c(n);
    fill_background(c, rng);
    const int r = rand_int(rng, n / 4, (3 * n) / 8);
    const int lo = r + w + 1, hi = n - 2 - r - w;
    const int ci = rand_int(rng, lo, std::max(lo, hi));
    const int cj = rand_int(rng, lo, std::max(lo, hi));
    draw_shape(c, cls, ci, cj, r, w, rand_int(rng, spec.stroke_min, spec.stroke_max));
    add_noise(c, rng, spec.noise);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        d.images[s * spec.image_size * spec.image_size + static_cast<std::size_t>(i * n + j)] =
            static_cast<T>(c.at(i, j)) / T(255);
    d.labels[s] = cls;
  }
  d.num_classes = spec.num_classes;
  d.normalization = Normalization::identity(1);
  d.name = "edge-shapes";
  return d;
}

template <Real T>
Dataset<T> gaussian_blobs(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw Error("gaussian-blobs needs at least 2 classes");
  const int n = static_cast<int>(spec.image_size);
  const std::size_t plane = spec.image_size * spec.image_size;
  // Class colours spread around the RGB cube.
  auto colour = [&](std::size_t cls, int ch) {
    const int k = static_cast<int>(spec.num_classes);
    const int phase = (static_cast<int>(cls) * 6 * 255) / k;  // position on a 6-segment hue wheel
    const int seg = phase / 255, f = phase % 255;
    static constexpr int up[6][3] = {{2, 1, 0}, {1, 2, 0}, {0, 2, 1}, {0, 1, 2}, {1, 0, 2}, {2, 0, 1}};
    // 2 = full, 0 = off, 1 = ramp (rising on even segments, falling on odd).
    const int code = up[seg % 6][ch];
    if (code == 2) return 255;
    if (code == 0) return 0;
    return seg % 2 == 0 ? f : 255 - f;
  };
  Dataset<T> d;
  d.images = Tensor<T>({spec.samples, 3, spec.image_size, spec.image_size});
  d.labels.resize(spec.samples);
  for (std::size_t s = 0; s < spec.samples; ++s) {
    Rng rng = Rng::derive(spec.seed, s);
    const std::size_t cls = s % spec.num_classes;
    const int bg = rand_int(rng, 60, 140);
    std::vector<int> px(3 * plane, bg);
    const int blobs = rand_int(rng, 1, 3);
    for (int b = 0; b < blobs; ++b) {
      const int ci = rand_int(rng, 0, n - 1), cj = rand_int(rng, 0, n - 1);
      const int r = rand_int(rng, std::max(1, n / 8), std::max(1, n / 4));
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const int d2 = (i - ci) * (i - ci) + (j - cj) * (j - cj);
          for (int ch = 0; ch < 3; ++ch) {
            int& p = px[static_cast<std::size_t>(ch) * plane + static_cast<std::size_t>(i * n + j)];
            // Rational falloff r^2 / (r^2 + d^2) towards the class colour.
            p += ((colour(cls, ch) - p) * r * r) / (r * r + d2);
          }
        }
    }
    for (auto& p : px) p = std::clamp(p + rand_int(rng, -spec.noise, spec.noise), 0, 255);
    for (std::size_t k = 0; k < 3 * plane; ++k) d.images[s * 3 * plane + k] = static_cast<T>(px[k]) / T(255);
    d.labels[s] = cls;
  }
  d.num_classes = spec.num_classes;
  d.normalization = Normalization::identity(3);
  d.name = "gaussian-blobs";
  return d;
}

}  // namespace detail

template <Real T = double>
Dataset<T> synthesize(const SyntheticSpec& spec) {
  auto d = spec.kind == SyntheticKind::edge_shapes ? detail::edge_shapes<T>(spec) : detail::gaussian_blobs<T>(spec);
  d.split = "synthetic";
  return d;
}

}  // namespace robustgrad
