#pragma once

#include <stdexcept>
#include <string>

namespace instructdiff {

// Bad input data or flags; CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical blow-up (non-finite loss or activation).
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& where, const std::string& what)
      : std::runtime_error("non-finite value at " + where + ": " + what), where_(where) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace instructdiff
