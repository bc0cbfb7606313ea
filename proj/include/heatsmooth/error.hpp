#pragma once

#include <stdexcept>
#include <string>

namespace heatsmooth {

// Bad arguments, malformed files, shape mismatches. The CLI maps these to exit code 2.
class InputError : public std::invalid_argument {
 public:
  explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

// Non-finite losses, unstable solver settings and other numerical aborts (exit code 3).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace heatsmooth
