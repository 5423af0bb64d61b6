#pragma once

// IDX files as used by MNIST: big-endian header, 0x00 0x00 <type> <ndim>, then ndim
// u32 dimensions, then unsigned bytes. Only the unsigned-byte type (0x08) is supported.

#include <cstdint>
#include <string>
#include <vector>

#include "robustgrad/data/dataset.hpp"
#include "robustgrad/io.hpp"

namespace robustgrad {

struct IdxArray {
  Shape shape;
  std::vector<std::uint8_t> bytes;
};

inline IdxArray decode_idx(std::string_view data) {
  if (data.size() < 4) throw TruncatedFile("IDX header needs 4 bytes, file has " + std::to_string(data.size()));
  const auto* u = reinterpret_cast<const unsigned char*>(data.data());
  if (u[0] != 0 || u[1] != 0 || u[2] != 0x08 || u[3] == 0) throw BadMagic("not an unsigned-byte IDX file");
  const std::size_t ndim = u[3];
  if (data.size() < 4 + 4 * ndim) throw TruncatedFile("IDX dimension table truncated");
  IdxArray a;
  for (std::size_t d = 0; d < ndim; ++d) {
    const unsigned char* p = u + 4 + 4 * d;
    a.shape.push_back((std::size_t{p[0]} << 24) | (std::size_t{p[1]} << 16) | (std::size_t{p[2]} << 8) | p[3]);
  }
  const std::size_t n = numel(a.shape);
  const std::size_t body = data.size() - 4 - 4 * ndim;
  if (body < n) throw TruncatedFile("IDX data has " + std::to_string(body) + " bytes, header promises " + std::to_string(n));
  if (body > n) throw BadRecordLength("IDX file has trailing bytes");
  a.bytes.assign(u + 4 + 4 * ndim, u + 4 + 4 * ndim + n);
  return a;
}

inline std::string encode_idx(const IdxArray& a) {
  if (a.shape.empty() || a.shape.size() > 255 || numel(a.shape) != a.bytes.size()) throw ShapeMismatch("IDX array");
  std::string out{'\0', '\0', '\x08', static_cast<char>(a.shape.size())};
  for (auto d : a.shape) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((d >> s) & 0xff));
  }
  out.append(reinterpret_cast<const char*>(a.bytes.data()), a.bytes.size());
  return out;
}

/// Images file [N,H,W] (and optionally a labels file [N]) as a single-channel dataset.
/// Without a labels file every label is 0.
template <Real T = double>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path = {},
                    std::size_t num_classes = 10) {
  const auto img = decode_idx(read_file(images_path));
  if (img.shape.size() != 3) throw ShapeMismatch("IDX images must be N,H,W");
  Dataset<T> d;
  const std::size_t n = img.shape[0];
  d.images = Tensor<T>({n, 1, img.shape[1], img.shape[2]});
  for (std::size_t i = 0; i < img.bytes.size(); ++i) d.images[i] = static_cast<T>(img.bytes[i]) / T(255);
  d.labels.assign(n, 0);
  if (!labels_path.empty()) {
    const auto lab = decode_idx(read_file(labels_path));
    if (lab.shape.size() != 1 || lab.shape[0] != n) throw ShapeMismatch("IDX labels do not match images");
    for (std::size_t i = 0; i < n; ++i) {
      if (lab.bytes[i] >= num_classes) throw LabelOutOfRange("IDX label " + std::to_string(lab.bytes[i]));
      d.labels[i] = lab.bytes[i];
    }
  }
  d.num_classes = num_classes;
  d.normalization = Normalization::identity(1);
  d.name = "idx";
  return d;
}

/// Writes a single-channel dataset as IDX images (pixels rounded to bytes) and labels.
template <Real T>
void save_idx(const Dataset<T>& d, const std::string& images_path, const std::string& labels_path) {
  if (d.images.dim(1) != 1) throw ShapeMismatch("IDX export needs one channel");
  IdxArray img{{d.size(), d.images.dim(2), d.images.dim(3)}, {}};
  img.bytes.reserve(d.images.size());
  for (T v : d.images.data()) img.bytes.push_back(static_cast<std::uint8_t>(std::lround(std::clamp<double>(v, 0, 1) * 255)));
  IdxArray lab{{d.size()}, {}};
  for (auto l : d.labels) {
    if (l > 255) throw LabelOutOfRange("IDX labels are bytes");
    lab.bytes.push_back(static_cast<std::uint8_t>(l));
  }
  write_file(images_path, encode_idx(img));
  write_file(labels_path, encode_idx(lab));
}

}  // namespace robustgrad
