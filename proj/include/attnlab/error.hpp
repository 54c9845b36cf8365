#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace attnlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text. `line()` is 1-based; 0 when not tied to a line.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Two inputs disagree (e.g. duplicate readings with different values).
class ConflictError : public Error {
 public:
  using Error::Error;
};

/// A precondition on arguments was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A road, timestamp, job or artifact that was asked for does not exist.
class NotFound : public Error {
 public:
  using Error::Error;
};

/// A statistical test cannot be carried out on the given data.
class Untestable : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class Diverged : public Error {
 public:
  using Error::Error;
};

}  // namespace attnlab
