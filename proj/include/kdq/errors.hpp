#pragma once

#include <stdexcept>
#include <string>

namespace kdq {

/// Bad arguments or malformed values handed to a library call.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input files or label sets that violate the data contract (bad records,
/// soft-label coverage gaps, duplicate ids).
class DataContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical failure during optimization (non-finite loss or gradients).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace kdq
