#pragma once

#include <stdexcept>
#include <string>

namespace vesselseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument, shape or configuration value.
class ParameterError : public Error {
public:
  using Error::Error;
};

/// Input that is well-formed but mathematically degenerate (empty mask, zero variance, ...).
class DegenerateInputError : public Error {
public:
  using Error::Error;
};

/// Violated call contract (e.g. backward on a non-scalar).
class ContractError : public Error {
public:
  using Error::Error;
};

/// Malformed or unsupported file. `field()` names the offending header field or section.
class FormatError : public Error {
public:
  FormatError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

private:
  std::string field_;
};

}  // namespace vesselseg
