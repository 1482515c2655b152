#pragma once

#include <stdexcept>
#include <string>

namespace icl {

// Shape or extent mismatch between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A documented precondition was violated by the caller.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// backward() was asked to sweep a graph that was already swept.
struct ReuseError : std::logic_error {
  using std::logic_error::logic_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Sequence or prompt longer than a model was built for.
struct CapacityError : std::length_error {
  using std::length_error::length_error;
};

// Not enough data, or data that cannot be normalized.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace icl
