#pragma once

#include <stdexcept>
#include <string>

namespace sop {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidTokenError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

// Model / suffix / benchmark hashes disagree with what an artifact claims.
class ProvenanceError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  SchemaError(std::string field, const std::string& what)
      : Error("schema error at '" + field + "': " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Remote judge failures, one type per failure mode.
class JudgeError : public Error {
 public:
  using Error::Error;
};

class JudgeTimeoutError : public JudgeError {
 public:
  using JudgeError::JudgeError;
};

class JudgeMalformedError : public JudgeError {
 public:
  using JudgeError::JudgeError;
};

class JudgeRangeError : public JudgeError {
 public:
  using JudgeError::JudgeError;
};

}  // namespace sop
