#pragma once

#include <stdexcept>
#include <string>

namespace hallucheck {

/// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FileNotFound : public IoError {
 public:
  explicit FileNotFound(const std::string& path)
      : IoError("file not found: " + path), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

/// Malformed input file. Carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line = 0)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

/// A domain invariant does not hold (duplicate id, dimension mismatch, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class UnknownName : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// An external model, weight file, or service is not available.
class Unavailable : public Error {
 public:
  using Error::Error;
};

/// A statistic is undefined for its input (zero variance, too few samples).
class UndefinedStatistic : public Error {
 public:
  using Error::Error;
};

}  // namespace hallucheck
