#pragma once

#include <stdexcept>
#include <string>

namespace tformer {

/// Invalid architecture or operator configuration (divisibility, partition sizes, unknown variant).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Tensor shapes that do not fit the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An operation instance was used out of order, e.g. a VJP before its forward pass.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A non-finite value appeared where only finite values are allowed.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tformer
