// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mcbm {

/// Precondition violated by the caller (shape mismatch, out-of-range index).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent input data. The CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// On-disk file does not follow the supported format subset.
class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Numerical failure during optimisation (non-finite loss, divergence).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// External MLLM / embedding service failed after retries. Exit code 3.
class ServiceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mcbm
