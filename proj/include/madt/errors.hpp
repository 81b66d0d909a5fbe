#pragma once

#include <stdexcept>
#include <string>

namespace madt {

// Invalid or inconsistent configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Corrupt or inconsistent dataset contents (CLI exit code 3).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (CLI exit code 4).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape mismatch; message names both shapes.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Broken API precondition (illegal action, empty mask, ...).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace madt
