#pragma once

#include <string>
#include <vector>

#include "equireg/ndgrad.hpp"

namespace equireg {

// Portable grid file: ASCII header "GRID <D> <c> <n1> ... <nD>\n" followed by
// little-endian float32, row-major, channels first. Displacement fields are
// D-channel grids.
void write_grid(const std::string& path, const GradGrid& grid);
GradGrid read_grid(const std::string& path);  // DataError names the byte offset

// Parameter checkpoints: a directory holding manifest.txt ("<name> <file>"
// per line) plus one grid file per parameter.
void save_checkpoint(const std::string& dir, const std::vector<const Param*>& params);
void load_checkpoint(const std::string& dir, const std::vector<Param*>& params);

}  // namespace equireg
