#pragma once

#include <stdexcept>
#include <string>

namespace htmdp {

// Base of every error the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class GapUndefinedError : public Error {
 public:
  using Error::Error;
};

// Raised when value iteration runs out of sweeps; keeps the last residual.
class IterationLimitError : public Error {
 public:
  IterationLimitError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

class NoCertificateError : public Error {
 public:
  using Error::Error;
};

// Query point sits where the greedy policy is not locally constant.
class NonRegularPointError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class SolverError : public Error {
 public:
  using Error::Error;
};

}  // namespace htmdp
