#pragma once

#include <stdexcept>
#include <string>

namespace mvt {

// Bad user input or configuration. CLI exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Missing, unreadable or malformed files. CLI exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values during training or refinement. CLI exit code 3.
class NumericDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mvt
