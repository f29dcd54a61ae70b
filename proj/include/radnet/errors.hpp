#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace radnet {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An argument is outside the domain of the operation.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// The object is not in a state where the call is allowed (e.g. backward before forward).
class StateError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity reached a place where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A file could not be read, decoded or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed text input. Carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Well-formed input that violates a semantic rule (unknown label, duplicate path).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A model specification that cannot be built.
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint decoding failure; `kind()` tells the cases apart.
class CheckpointError : public Error {
 public:
  enum class Kind { bad_magic, unknown_version, truncated, malformed };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace radnet
