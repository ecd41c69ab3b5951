#pragma once

#include <stdexcept>
#include <string>

namespace equireg {

// Shape/precondition mismatch between grids (wrong extents, channel counts).
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// API contract violation (backward twice, non-scalar loss, out-of-range sample).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed on-disk data (grid files, datasets, configs).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace equireg
