#pragma once

#include <stdexcept>

namespace gsaf {

// Shape mismatch between operands.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Violated precondition (empty sequence, out-of-range offset, reused tape, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Bad input data (missing cells, non-uniform timestamps, mismatched files).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed serialized artifact (checkpoint, report, graph file).
struct FormatError : DataError {
  using DataError::DataError;
};

// Numerical failure (non-finite values, factorization breakdown, divergence).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace gsaf
