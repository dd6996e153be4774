#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace pseudoseg {

// Base of every error raised by the toolkit. The CLI maps subclasses onto
// exit codes: 1 for validation/contract failures, 2 for external failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed JSON (or JSON Lines) text. `offset` is the byte position the
// parser stopped at.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Structurally valid input that breaks a type invariant (odd polygon length,
// score outside [0,1], ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A reference (image_id, category_id) that does not resolve.
class ReferentialError : public Error {
 public:
  using Error::Error;
};

// Caller broke an operation precondition (wrong channel count, mismatched
// tensor shapes, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// The external inference adapter failed: nonzero exit, timeout, missing file.
class AdapterError : public Error {
 public:
  AdapterError(const std::string& what, std::string diagnostics = {})
      : Error(what), diagnostics_(std::move(diagnostics)) {}

  const std::string& diagnostics() const noexcept { return diagnostics_; }

 private:
  std::string diagnostics_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace pseudoseg
