#pragma once

#include <filesystem>

#include "mthg/grid.hpp"

namespace mthg {

// "grd1" on-disk interchange: magic "GRD1", little-endian u32 width and
// height, then width*height IEEE-754 32-bit floats row-major. NaN encodes an
// invalid cell; the mask is derived as not-NaN on load and imposed as NaN on
// save.

void save_grid(const std::filesystem::path& path, const LayerGrid& grid);
LayerGrid load_grid(const std::filesystem::path& path);

}  // namespace mthg
