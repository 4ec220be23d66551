#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace twice {

// Root of every error the library throws. Callers that only care about
// "something went wrong in twice" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Errors caused by bad input data or configuration (CLI exit code 1).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class MalformedRow : public ValidationError {
 public:
  MalformedRow(std::size_t line, const std::string& what)
      : ValidationError("malformed row at line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class SchemaMismatch : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DuplicateWorkerYear : public ValidationError {
 public:
  DuplicateWorkerYear(const std::string& worker, int year)
      : ValidationError("duplicate (worker, year) pair: (" + worker + ", " + std::to_string(year) + ")") {}
};

class DegenerateSplit : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class EmptyInput : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class AllWeightsZero : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class LengthMismatch : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class UnknownFeature : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class EmptyGrid : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DegenerateSupport : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NotConnected : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigInvalid : public ValidationError {
 public:
  ConfigInvalid(const std::string& key, const std::string& why)
      : ValidationError("invalid config key '" + key + "': " + why), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class MissingArtifact : public ValidationError {
 public:
  explicit MissingArtifact(const std::string& stage)
      : ValidationError("missing artifact from stage '" + stage + "'"), stage_(stage) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

// Numerical failures (CLI exit code 2).
class NumericalError : public Error {
 public:
  using Error::Error;
};

class EmptyTrainingCell : public NumericalError {
 public:
  EmptyTrainingCell(std::size_t a, std::size_t b)
      : NumericalError("training complement of cell (" + std::to_string(a + 1) + ", " +
                       std::to_string(b + 1) + ") is empty; B is too large for this panel"),
        a_(a), b_(b) {}
  std::size_t worker_block() const noexcept { return a_; }
  std::size_t firm_block() const noexcept { return b_; }

 private:
  std::size_t a_, b_;
};

class SingularControls : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class SingularDesign : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace twice
