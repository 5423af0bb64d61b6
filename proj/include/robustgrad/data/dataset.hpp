#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "robustgrad/data/normalization.hpp"
#include "robustgrad/errors.hpp"
#include "robustgrad/rng.hpp"
#include "robustgrad/tensor.hpp"

namespace robustgrad {

/// Images in raw pixel space [0,1] with integer labels. Normalization is metadata, applied
/// by the network on the way in.
template <Real T = double>
struct Dataset {
  Tensor<T> images{Shape{0, 1, 1, 1}};
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  Normalization normalization = Normalization::identity(1);
  std::string name;
  std::string split;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  std::size_t image_numel() const { return images.dim(1) * images.dim(2) * images.dim(3); }

  void validate() const {
    if (images.rank() != 4 || images.dim(0) != labels.size()) {
      throw ShapeMismatch("dataset images " + to_string(images.shape()) + " vs " + std::to_string(labels.size()) +
                          " labels");
    }
    for (auto l : labels)
      if (l >= num_classes) throw LabelOutOfRange("label " + std::to_string(l) + " >= " + std::to_string(num_classes));
    for (T v : images.data())
      if (!(v >= T(0) && v <= T(1))) throw Error("dataset pixel outside [0,1]");
    if (normalization.channels() != images.dim(1)) throw ShapeMismatch("normalization channels vs image channels");
    normalization.validate();
  }

  /// Images [B,C,H,W] for the given example indices.
  Tensor<T> gather(std::span<const std::size_t> idx) const {
    const std::size_t per = image_numel();
    Shape s = images.shape();
    s[0] = idx.size();
    Tensor<T> out(s);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= size()) throw Error("example index out of range");
      std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                  out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return out;
  }

  std::vector<std::size_t> gather_labels(std::span<const std::size_t> idx) const {
    std::vector<std::size_t> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels.at(idx[i]);
    return out;
  }

  /// Contiguous examples [begin, begin + count).
  Dataset slice(std::size_t begin, std::size_t count) const {
    if (begin > size() || count > size() - begin) throw Error("dataset slice out of range");
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
    return subset(idx);
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.images = gather(idx);
    out.labels = gather_labels(idx);
    out.num_classes = num_classes;
    out.normalization = normalization;
    out.name = name;
    out.split = split;
    return out;
  }

  template <Real U>
  Dataset<U> cast() const {
    Dataset<U> out;
    out.images = images.template cast<U>();
    out.labels = labels;
    out.num_classes = num_classes;
    out.normalization = normalization;
    out.name = name;
    out.split = split;
    return out;
  }
};

/// Splits off the last `val_count` examples as a validation set.
template <Real T>
std::pair<Dataset<T>, Dataset<T>> train_val_split(const Dataset<T>& d, std::size_t val_count) {
  if (val_count > d.size()) throw Error("validation split larger than dataset");
  auto train = d.slice(0, d.size() - val_count);
  auto val = d.slice(d.size() - val_count, val_count);
  train.split = "train";
  val.split = "val";
  return {std::move(train), std::move(val)};
}

/// Examples of `a` followed by those of `b`; metadata comes from `a`.
template <Real T>
Dataset<T> concatenate(const Dataset<T>& a, const Dataset<T>& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.image_shape() != b.image_shape() || a.num_classes != b.num_classes) throw ShapeMismatch("concatenate datasets");
  Dataset<T> out = a;
  Shape s = a.images.shape();
  s[0] += b.size();
  std::vector<T> px(a.images.data().begin(), a.images.data().end());
  px.insert(px.end(), b.images.data().begin(), b.images.data().end());
  out.images = Tensor<T>(s, std::move(px));
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

/// Per-channel mean and standard deviation of the raw pixels.
template <Real T>
Normalization channel_statistics(const Dataset<T>& d) {
  if (d.empty()) throw EmptyDataset("channel statistics of empty dataset");
  const std::size_t c = d.images.dim(1), plane = d.images.dim(2) * d.images.dim(3);
  Normalization n = Normalization::identity(c);
  std::vector<double> s1(c, 0), s2(c, 0);
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    const std::size_t ch = (i / plane) % c;
    s1[ch] += d.images[i];
    s2[ch] += static_cast<double>(d.images[i]) * d.images[i];
  }
  const double count = static_cast<double>(d.size() * plane);
  for (std::size_t ch = 0; ch < c; ++ch) {
    n.mean[ch] = s1[ch] / count;
    n.std[ch] = std::sqrt(std::max(s2[ch] / count - n.mean[ch] * n.mean[ch], 1e-12));
  }
  return n;
}

}  // namespace robustgrad
