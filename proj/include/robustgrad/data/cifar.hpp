#pragma once

// CIFAR-10 binary batches: records of 1 label byte followed by 3072 pixel bytes
// (1024 red, 1024 green, 1024 blue, each row-major 32x32).

#include <string>

#include "robustgrad/data/dataset.hpp"
#include "robustgrad/io.hpp"

namespace robustgrad {

inline constexpr std::size_t kCifarRecord = 3073;

template <Real T = double>
Dataset<T> decode_cifar_binary(std::string_view bytes) {
  if (bytes.size() % kCifarRecord != 0) {
    throw BadRecordLength("CIFAR file size " + std::to_string(bytes.size()) + " is not a multiple of 3073");
  }
  const std::size_t n = bytes.size() / kCifarRecord;
  Dataset<T> d;
  d.images = Tensor<T>({n, 3, 32, 32});
  d.labels.resize(n);
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = u + i * kCifarRecord;
    if (rec[0] > 9) throw LabelOutOfRange("CIFAR label " + std::to_string(rec[0]));
    d.labels[i] = rec[0];
    for (std::size_t k = 0; k < 3072; ++k) d.images[i * 3072 + k] = static_cast<T>(rec[1 + k]) / T(255);
  }
  d.num_classes = 10;
  d.normalization = Normalization::identity(3);
  d.name = "cifar10";
  return d;
}

template <Real T = double>
Dataset<T> load_cifar_binary(const std::string& path) {
  return decode_cifar_binary<T>(read_file(path));
}

}  // namespace robustgrad
