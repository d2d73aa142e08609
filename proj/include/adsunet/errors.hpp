#pragma once

#include <stdexcept>
#include <string>

namespace adsunet {

// Base of every error raised by the library. `kind()` is the stable tag used
// in the CLI's machine-readable error record.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& what) : Error("dimension", what) {}
};

struct InputSizeError : Error {
  explicit InputSizeError(const std::string& what) : Error("input_size", what) {}
};

struct ValueError : Error {
  explicit ValueError(const std::string& what) : Error("value", what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error("io", what) {}
};

struct StateError : Error {
  explicit StateError(const std::string& what) : Error("state", what) {}
};

}  // namespace adsunet
