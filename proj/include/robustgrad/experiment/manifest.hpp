#pragma once

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "robustgrad/io.hpp"
#include "robustgrad/tape.hpp"

namespace robustgrad {

inline constexpr std::string_view kVersion = "robustgrad 0.1.0";

/// 64-bit FNV-1a, printed as 16 hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// Collects the files of one run. The manifest holds everything that is a function of
/// (config, seed, data); wall time goes to a separate timing file so reruns stay
/// byte-identical.
class RunManifest {
 public:
  RunManifest(std::string command, std::string out_dir, std::string config_hash, std::uint64_t seed)
      : command_(std::move(command)), dir_(std::move(out_dir)), hash_(std::move(config_hash)), seed_(seed) {
    std::filesystem::create_directories(dir_);
  }

  const std::string& dir() const noexcept { return dir_; }
  const std::string& config_hash() const noexcept { return hash_; }
  std::string path(const std::string& name) const { return (std::filesystem::path(dir_) / name).string(); }

  /// First line of every CSV this run writes.
  std::string csv_reference() const { return "# manifest=" + manifest_name() + " config_hash=" + hash_ + "\n"; }

  /// Runs of different commands can share a directory; each has its own manifest.
  std::string manifest_name() const { return command_ + ".manifest.json"; }

  void write(const std::string& name, const std::string& bytes) {
    write_file(path(name), bytes);
    outputs_.push_back({{"path", name}, {"bytes", bytes.size()}, {"fnv1a", fnv1a_hex(bytes)}});
  }

  void write_csv(const std::string& name, const std::string& body) { write(name, csv_reference() + body); }

  void write_json(const std::string& name, const nlohmann::ordered_json& j) { write(name, j.dump(2) + "\n"); }

  void add_passes(const PassTally& t) { passes_ += t; }
  void set(const std::string& key, nlohmann::ordered_json v) { extra_[key] = std::move(v); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command_;
    j["version"] = kVersion;
    j["config_hash"] = hash_;
    j["seed"] = seed_;
    for (const auto& [k, v] : extra_.items()) j[k] = v;
    j["passes"] = {{"forward", passes_.forward}, {"backward", passes_.backward}, {"total", passes_.total()}};
    j["outputs"] = outputs_;
    return j;
  }

  /// Writes the manifest and its timing sidecar; call once at the end of the run.
  void finish(double wall_seconds) const {
    write_file(path(manifest_name()), to_json().dump(2) + "\n");
    nlohmann::ordered_json t{{"command", command_}, {"config_hash", hash_}, {"wall_seconds", wall_seconds}};
    write_file(path(command_ + ".timing.json"), t.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::string dir_;
  std::string hash_;
  std::uint64_t seed_;
  PassTally passes_;
  nlohmann::ordered_json extra_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json outputs_ = nlohmann::ordered_json::array();
};

/// Rows of a CSV written by RunManifest, without comment lines. The first row is the header.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace robustgrad
