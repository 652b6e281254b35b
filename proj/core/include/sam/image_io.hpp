#pragma once

#include <string>
#include <vector>

#include "sam/grid.hpp"

namespace sam {

/// Binary PGM (P5) / PPM (P6) emission, maxval 255.
void write_pgm(const std::string& path, int width, int height,
               const std::vector<std::uint8_t>& pixels);
void write_ppm(const std::string& path, int width, int height,
               const std::vector<std::uint8_t>& rgb);

/// Tile 2-D images (values clamped to [0,1]) into a rows x cols montage with
/// a 1-pixel separator and write it as PGM (1 channel) or PPM (3 channels).
/// Throws for other channel counts or 3-D grids.
void write_image_grid(const std::string& path, const Grid& grid, int channels,
                      const std::vector<std::vector<double>>& images, int rows, int cols);

} // namespace sam
