#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedwsq {

/// Shapes of two operands do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value violates an operation's precondition.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid or unsupported configuration (bad key, bit-width, group count...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what, std::string key = {})
      : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Iterative numerics failed to converge or produced non-finite values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite gradient encountered during local training.
class TrainingError : public NumericalError {
 public:
  TrainingError(const std::string& what, int layer_id)
      : NumericalError(what), layer_id_(layer_id) {}
  int layer_id() const noexcept { return layer_id_; }

 private:
  int layer_id_;
};

/// A value could not be encoded (NaN/Inf input).
class EncodingError : public std::runtime_error {
 public:
  EncodingError(const std::string& what, std::size_t position)
      : std::runtime_error(what), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

/// A packed stream is truncated or inconsistent with its header.
class DecodingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace fedwsq
