#pragma once

#include <stdexcept>
#include <string>

namespace legs {

/// Base class for every error raised by the library. The category maps onto
/// the command-line exit codes (config = 2, data = 3, numerical = 4).
class Error : public std::runtime_error {
 public:
  enum class Kind { config, data, numerical };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

  const char* kind_name() const noexcept {
    switch (kind_) {
      case Kind::config: return "config";
      case Kind::data: return "data";
      case Kind::numerical: return "numerical";
    }
    return "unknown";
  }

  int exit_code() const noexcept {
    switch (kind_) {
      case Kind::config: return 2;
      case Kind::data: return 3;
      case Kind::numerical: return 4;
    }
    return 1;
  }

 private:
  Kind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(Kind::config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(Kind::data, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(Kind::numerical, what) {}
};

}  // namespace legs
