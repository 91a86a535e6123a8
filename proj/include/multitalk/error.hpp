#pragma once

#include <stdexcept>
#include <string>

namespace multitalk {

// Base class for every error raised by the library. `kind()` is a stable,
// machine-readable tag used by the CLI error record.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& message) : Error("parse", message) {}
};

// Invariant violation. `field()` names the offending field, e.g.
// "lip_vertex_indices" or "splits.test".
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& message)
      : Error("validation", field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& message) : Error("format", message) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& message) : Error("shape", message) {}
};

class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& message)
      : Error("non_finite", message) {}
};

class PreconditionError : public Error {
 public:
  explicit PreconditionError(const std::string& message)
      : Error("precondition", message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& message)
      : Error("contract", message) {}
};

class UnknownLanguageError : public Error {
 public:
  explicit UnknownLanguageError(const std::string& language)
      : Error("unknown_language", "language '" + language + "' is not registered"),
        language_(language) {}
  const std::string& language() const { return language_; }

 private:
  std::string language_;
};

class AdapterError : public Error {
 public:
  explicit AdapterError(const std::string& message) : Error("adapter", message) {}
};

// Training produced a non-finite loss. Carries the encoded checkpoint from the
// last completed epoch (or initialization) so callers can persist it.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& message, std::string last_good_checkpoint,
                  int epoch)
      : Error("divergence", message),
        last_good_(std::move(last_good_checkpoint)),
        epoch_(epoch) {}
  const std::string& last_good_checkpoint() const { return last_good_; }
  int epoch() const { return epoch_; }

 private:
  std::string last_good_;
  int epoch_;
};

}  // namespace multitalk
