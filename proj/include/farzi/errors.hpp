#pragma once

#include <cstddef>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace farzi {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or preconditions that the caller can fix.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf surfaced during a computation. `where` names the segment or step.
class NumericError : public Error {
 public:
  NumericError(std::string where, const std::string& what)
      : Error(what + " (" + where + ")"), where_(std::move(where)) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

/// Malformed input file. `offset` is the byte (or line) position of the problem.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Reconstructed optimizer state diverged from a stored snapshot.
class ReversalDriftError : public Error {
  static std::string sci(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", x);
    return buf;
  }

 public:
  ReversalDriftError(std::size_t step, double magnitude)
      : Error("reversal drift " + sci(magnitude) + " at step " + std::to_string(step)),
        step_(step),
        magnitude_(magnitude) {}
  std::size_t step() const noexcept { return step_; }
  double magnitude() const noexcept { return magnitude_; }

 private:
  std::size_t step_;
  double magnitude_;
};

class DegenerateTrajectoryError : public Error {
 public:
  using Error::Error;
};

}  // namespace farzi
