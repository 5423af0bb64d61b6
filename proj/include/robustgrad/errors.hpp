#pragma once

#include <stdexcept>
#include <string>

namespace robustgrad {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatch : public Error {
 public:
  explicit ShapeMismatch(const std::string& what) : Error("shape mismatch: " + what) {}
};

class NonScalarOutput : public Error {
 public:
  explicit NonScalarOutput(const std::string& what) : Error("non-scalar output: " + what) {}
};

class LabelOutOfRange : public Error {
 public:
  explicit LabelOutOfRange(const std::string& what) : Error("label out of range: " + what) {}
};

class BadMagic : public Error {
 public:
  explicit BadMagic(const std::string& what) : Error("bad magic: " + what) {}
};

class TruncatedFile : public Error {
 public:
  explicit TruncatedFile(const std::string& what) : Error("truncated file: " + what) {}
};

class BadRecordLength : public Error {
 public:
  explicit BadRecordLength(const std::string& what) : Error("bad record length: " + what) {}
};

class CheckpointMismatch : public Error {
 public:
  explicit CheckpointMismatch(const std::string& what) : Error("checkpoint mismatch: " + what) {}
};

class EmptyDataset : public Error {
 public:
  explicit EmptyDataset(const std::string& what) : Error("empty dataset: " + what) {}
};

/// Configuration problem; `key` and `line` locate it in the source document (line 0 = unknown).
class ConfigError : public Error {
 public:
  ConfigError(std::string key, int line, const std::string& what)
      : Error(format(key, line, what)), key_(std::move(key)), line_(line) {}

  const std::string& key() const noexcept { return key_; }
  int line() const noexcept { return line_; }

 private:
  static std::string format(const std::string& key, int line, const std::string& what) {
    std::string out = "config error";
    if (line > 0) out += " at line " + std::to_string(line);
    if (!key.empty()) out += " (key '" + key + "')";
    return out + ": " + what;
  }

  std::string key_;
  int line_;
};

}  // namespace robustgrad
