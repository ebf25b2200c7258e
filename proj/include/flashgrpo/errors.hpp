// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace flashgrpo {

// Invalid configuration or construction arguments.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Tensor shapes that do not fit the operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain (t <= 0, non-positive variance, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Caller broke a precondition of the API.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Unknown condition / class id.
class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// A NaN or Inf showed up in a loss or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace flashgrpo
