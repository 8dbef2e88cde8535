// SPDX-License-Identifier: Apache-2.0
//
// Error categories. Each maps to a CLI exit code.

#pragma once

#include <stdexcept>
#include <string>

namespace taskadapter {

/// Invalid configuration values or combinations (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing, malformed, or incomplete data and corpus files (CLI exit code 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values in a forward pass or loss (CLI exit code 4).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a documented precondition (shapes, batch roles, axis sizes).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Filesystem failures while writing reports, checkpoints, or datasets.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace taskadapter
