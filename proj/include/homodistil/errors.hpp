#pragma once

#include <stdexcept>
#include <string>

namespace homodistil {

/// Shape or dimension mismatch at an op boundary.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Non-finite value produced by an op.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A precondition of an operation was violated by the caller.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Invalid configuration value or unknown configuration key.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Bad input data: corpus, token ids, checkpoint files.
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Checkpoint contents disagree with their masks.
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace homodistil
