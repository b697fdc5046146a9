#pragma once

#include <stdexcept>
#include <string>

namespace pcovkws {

// Raised when operand extents do not line up.
class DimensionError : public std::invalid_argument {
 public:
  explicit DimensionError(const std::string& what) : std::invalid_argument(what) {}
};

// Raised for inputs the math is undefined on (zero vectors, single-class trial sets, ...).
class DegenerateInputError : public std::domain_error {
 public:
  explicit DegenerateInputError(const std::string& what) : std::domain_error(what) {}
};

// Raised by the autodiff tape on misuse (double backward, non-scalar loss).
class GraphError : public std::logic_error {
 public:
  explicit GraphError(const std::string& what) : std::logic_error(what) {}
};

}  // namespace pcovkws
