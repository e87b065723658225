#pragma once

#include <stdexcept>
#include <string>

namespace narf {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// The requested output is not defined for the architecture in use.
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss or gradient.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace narf
