#pragma once

#include <stdexcept>
#include <string>

namespace ntklab {

/// Raised when an argument violates an operation's precondition.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for configuration problems detected before any compute starts.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An iterative solver ran out of iterations. Carries the last estimate.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double last_estimate, int iterations)
      : std::runtime_error(what), last_estimate_(last_estimate), iterations_(iterations) {}

  double last_estimate() const noexcept { return last_estimate_; }
  int iterations() const noexcept { return iterations_; }

 private:
  double last_estimate_;
  int iterations_;
};

}  // namespace ntklab
