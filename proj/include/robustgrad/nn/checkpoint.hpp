#pragma once

// Checkpoint layout, all integers little-endian:
//
//   "RGCK"                 4-byte magic
//   u32 version            currently 1
//   u32 config_length
//   config bytes           JSON object (see network_config_to_json)
//   u32 tensor_count
//   per tensor:
//     u32 name_length, name bytes
//     u8 dtype             1 = f32, 2 = f64
//     u32 ndim, u64 dims[ndim]
//     data                 numel * sizeof(dtype) bytes, little-endian IEEE-754
//
// Parameters come first in network order, then norm buffers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "robustgrad/errors.hpp"
#include "robustgrad/io.hpp"
#include "robustgrad/nn/network.hpp"

namespace robustgrad {

inline constexpr char kCheckpointMagic[4] = {'R', 'G', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::ordered_json network_config_to_json(const NetworkConfig& cfg) {
  nlohmann::ordered_json j;
  std::vector<std::string> layers;
  for (const auto& l : cfg.layers) layers.push_back(layer_to_string(l));
  j["layers"] = layers;
  j["activation"] = std::string(activation_name(cfg.activation));
  j["num_classes"] = cfg.num_classes;
  j["input_shape"] = cfg.input_shape;
  j["normalization"] = {{"mean", cfg.normalization.mean}, {"std", cfg.normalization.std}};
  return j;
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
  NetworkConfig cfg;
  try {
    for (const auto& s : j.at("layers")) cfg.layers.push_back(parse_layer(s.get<std::string>()));
    const auto act = parse_activation(j.at("activation").get<std::string>());
    if (!act) throw CheckpointMismatch("unknown activation in checkpoint");
    cfg.activation = *act;
    cfg.num_classes = j.at("num_classes").get<std::size_t>();
    cfg.input_shape = j.at("input_shape").get<Shape>();
    cfg.normalization.mean = j.at("normalization").at("mean").get<std::vector<double>>();
    cfg.normalization.std = j.at("normalization").at("std").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointMismatch(std::string("checkpoint config: ") + e.what());
  }
  cfg.layer_shapes();
  return cfg;
}

namespace detail {

inline void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}

template <class U>
void put_le(std::string& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
    put_bytes(out, b, sizeof(U));
  } else {
    put_bytes(out, &v, sizeof(U));
  }
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <class U>
  U le() {
    unsigned char b[sizeof(U)];
    take(b, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) {
      for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
    }
    U v;
    std::memcpy(&v, b, sizeof(U));
    return v;
  }

  std::string str(std::size_t n) {
    if (n > remaining()) throw TruncatedFile("checkpoint ends inside a string");
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  void take(void* dst, std::size_t n) {
    if (n > remaining()) throw TruncatedFile("checkpoint ends after " + std::to_string(pos_) + " bytes");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

template <Real T>
void put_tensor(std::string& out, const std::string& name, const Tensor<T>& t) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
  for (T v : t.data()) put_le<T>(out, v);
}

}  // namespace detail

/// A decoded checkpoint: the config text plus named tensors in file order, converted to T.
template <Real T>
struct TensorArchive {
  std::string config_json;
  std::vector<NamedTensor<T>> tensors;

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.value;
    return nullptr;
  }
};

template <Real T>
std::string encode_archive(const std::string& config_json, const std::vector<NamedTensor<T>>& tensors) {
  std::string out;
  detail::put_bytes(out, kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config_json.size()));
  out += config_json;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) detail::put_tensor(out, t.name, t.value);
  return out;
}

template <Real T>
TensorArchive<T> decode_archive(std::string_view bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.take(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw BadMagic("not a checkpoint file");
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) throw CheckpointMismatch("unsupported checkpoint version " + std::to_string(version));
  TensorArchive<T> a;
  a.config_json = r.str(r.le<std::uint32_t>());
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor<T> nt;
    nt.name = r.str(r.le<std::uint32_t>());
    const auto dtype = r.le<std::uint8_t>();
    const auto ndim = r.le<std::uint32_t>();
    if (ndim > 8) throw CheckpointMismatch("tensor '" + nt.name + "' has rank " + std::to_string(ndim));
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(r.le<std::uint64_t>());
    const std::size_t n = numel(shape);
    std::vector<T> data(n);
    if (dtype == static_cast<std::uint8_t>(DType::f64)) {
      if (n * 8 > r.remaining()) throw TruncatedFile("tensor '" + nt.name + "' data");
      for (auto& v : data) v = static_cast<T>(r.le<double>());
    } else if (dtype == static_cast<std::uint8_t>(DType::f32)) {
      if (n * 4 > r.remaining()) throw TruncatedFile("tensor '" + nt.name + "' data");
      for (auto& v : data) v = static_cast<T>(r.le<float>());
    } else {
      throw CheckpointMismatch("tensor '" + nt.name + "' has unknown dtype " + std::to_string(dtype));
    }
    nt.value = Tensor<T>(std::move(shape), std::move(data));
    a.tensors.push_back(std::move(nt));
  }
  if (r.remaining() != 0) throw CheckpointMismatch("trailing bytes after tensor table");
  return a;
}

template <Real T>
std::string encode_checkpoint(const Network<T>& net) {
  std::vector<NamedTensor<T>> all = net.parameters();
  all.insert(all.end(), net.buffers().begin(), net.buffers().end());
  return encode_archive(network_config_to_json(net.config()).dump(), all);
}

/// Rebuilds a network from checkpoint bytes. Every tensor must match the config by name
/// and shape.
template <Real T>
Network<T> decode_checkpoint(std::string_view bytes) {
  auto a = decode_archive<T>(bytes);
  nlohmann::json cj;
  try {
    cj = nlohmann::json::parse(a.config_json);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointMismatch(std::string("checkpoint config is not JSON: ") + e.what());
  }
  Rng rng(0);
  Network<T> net(network_config_from_json(cj), rng);
  const std::size_t expected = net.parameters().size() + net.buffers().size();
  if (a.tensors.size() != expected) {
    throw CheckpointMismatch("checkpoint has " + std::to_string(a.tensors.size()) + " tensors, config needs " +
                             std::to_string(expected));
  }
  std::size_t i = 0;
  for (auto* group : {&net.parameters(), &net.buffers()}) {
    for (auto& slot : *group) {
      const auto& src = a.tensors[i++];
      if (src.name != slot.name || src.value.shape() != slot.value.shape()) {
        throw CheckpointMismatch("tensor '" + src.name + "' " + to_string(src.value.shape()) + " does not match '" +
                                 slot.name + "' " + to_string(slot.value.shape()));
      }
      slot.value = src.value;
    }
  }
  return net;
}

template <Real T>
void save_checkpoint(const Network<T>& net, const std::string& path) {
  write_file(path, encode_checkpoint(net));
}

template <Real T>
Network<T> load_checkpoint(const std::string& path) {
  return decode_checkpoint<T>(read_file(path));
}

}  // namespace robustgrad
