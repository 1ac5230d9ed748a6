#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sama {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the primitive they were passed to.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A loss, gradient or intermediate value became NaN or infinite.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Misuse of a recorded tape (second backward, unknown leaf, ...).
class TapeError : public Error {
 public:
  using Error::Error;
};

/// Neumann series iterate blew up.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t term)
      : Error(what), term_(term) {}
  std::size_t term() const noexcept { return term_; }

 private:
  std::size_t term_;
};

/// Conjugate gradient met a direction with non-positive curvature.
class CurvatureError : public Error {
 public:
  CurvatureError(const std::string& what, std::size_t iteration)
      : Error(what), iteration_(iteration) {}
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

/// Worker replicas disagree at the start of a synchronized step.
class ReplicaError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unknown configuration entries.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, std::size_t line = 0, std::string key = {})
      : Error(what), line_(line), key_(std::move(key)) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& key() const noexcept { return key_; }

 private:
  std::size_t line_;
  std::string key_;
};

}  // namespace sama
