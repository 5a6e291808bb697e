// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace genq {

/// Root of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not agree for the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A serialized file is malformed, truncated or has the wrong magic/version.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Quantization parameters are invalid (e.g. non-positive step).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// An operation was invoked on a quantized model in the wrong stage.
class StageError : public Error {
 public:
  using Error::Error;
};

/// A filter score could not be computed for a given sample or patch.
class ScoringError : public Error {
 public:
  using Error::Error;
};

/// The filtering pipeline was asked to apply a stage the model cannot support.
class RoutingError : public Error {
 public:
  using Error::Error;
};

/// Training or finetuning produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Talking to the external generation service failed.
class TransportError : public Error {
 public:
  using Error::Error;
};

/// The experiment configuration is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace genq
