#pragma once

#include <stdexcept>
#include <string>

namespace fmbff {

// Root of every error raised by the library. CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extent disagreement (names the offending axis where possible).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameter / config field.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Operation called in a state that cannot serve it (e.g. eval-mode batch-norm
// before any running statistics were collected).
class StateError : public Error {
 public:
  using Error::Error;
};

// API misuse: backward on a leaf, missing gradients, nondeterministic oracle.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed bytes in an input file.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Well-formed file of the wrong kind: bad magic, version, dtype, checksum.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Paired inputs that disagree (image/mask extents).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace fmbff
