#pragma once

#include <stdexcept>
#include <string>

namespace wheatnet {

/// Tensor or map dimensions that do not fit the operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed, missing or inconsistent input data (files, annotations, manifests).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf during optimization or an otherwise unusable numeric state.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the autodiff tape (double backward, non-scalar loss, detached loss).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace wheatnet
