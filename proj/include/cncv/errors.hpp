#pragma once

#include <stdexcept>
#include <string>

namespace cncv {

/// Base of all library errors. exit_code() maps onto the CLI's exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 2; }
};

/// Invalid configuration or arguments (exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

/// Misuse of an API: shape mismatches, mixed tapes, unsupported problem kinds.
class StructuralError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

/// Non-finite values, failed factorizations, diverging samplers (exit code 2).
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// File system and parse failures (exit code 3).
class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

inline void require_dims(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw StructuralError(std::string(what) + ": dimension mismatch (got " + std::to_string(got) +
                          ", expected " + std::to_string(want) + ")");
  }
}

}  // namespace cncv
