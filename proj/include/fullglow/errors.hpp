#pragma once

#include <stdexcept>
#include <string>

namespace fullglow {

// Error taxonomy. Each category maps onto one CLI exit code (see tools/).

/// Shapes or hyperparameters that cannot describe a valid model or operation.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// API misuse: wrong call order, negative temperature, non-scalar loss, ...
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite values. `where` names the operation or flow step that produced them.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::string where)
      : std::runtime_error(what + " [at " + where + "]"), where_(std::move(where)) {}

  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

/// Malformed image or checkpoint payloads.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem failures (cannot open, cannot write).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fullglow
