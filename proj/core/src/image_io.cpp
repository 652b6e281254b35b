#include "sam/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "sam/error.hpp"

namespace sam {

namespace {

void write_pnm(const std::string& path, const char* magic, int width, int height, int bpp,
               const std::vector<std::uint8_t>& pixels) {
    if (static_cast<std::size_t>(width) * height * bpp != pixels.size())
        throw Error("write_pnm: pixel buffer size mismatch");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + path);
    os << magic << "\n" << width << " " << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(pixels.data()),
             static_cast<std::streamsize>(pixels.size()));
    if (!os) throw Error("short write to " + path);
}

std::uint8_t to_byte(double v) {
    v = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

} // namespace

void write_pgm(const std::string& path, int width, int height,
               const std::vector<std::uint8_t>& pixels) {
    write_pnm(path, "P5", width, height, 1, pixels);
}

void write_ppm(const std::string& path, int width, int height,
               const std::vector<std::uint8_t>& rgb) {
    write_pnm(path, "P6", width, height, 3, rgb);
}

void write_image_grid(const std::string& path, const Grid& grid, int channels,
                      const std::vector<std::vector<double>>& images, int rows, int cols) {
    if (grid.nd != 2) throw Error("write_image_grid: only 2-D grids are supported");
    if (channels != 1 && channels != 3)
        throw Error("write_image_grid: need 1 (PGM) or 3 (PPM) channels");
    if (static_cast<int>(images.size()) < rows * cols)
        throw Error("write_image_grid: not enough images for the grid");

    const int ih = grid.n[0], iw = grid.n[1];
    const std::int64_t m = grid.voxels();
    const int height = rows * ih + (rows - 1);
    const int width = cols * iw + (cols - 1);
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width) * height * channels, 0);

    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const std::vector<double>& img = images[r * cols + c];
            if (img.size() != static_cast<std::size_t>(channels) * m)
                throw Error("write_image_grid: image size mismatch");
            const int y0 = r * (ih + 1), x0 = c * (iw + 1);
            for (int y = 0; y < ih; ++y)
                for (int x = 0; x < iw; ++x) {
                    const std::size_t dst =
                        (static_cast<std::size_t>(y0 + y) * width + (x0 + x)) * channels;
                    const std::int64_t src = grid.index(y, x);
                    for (int ch = 0; ch < channels; ++ch)
                        pixels[dst + ch] = to_byte(img[static_cast<std::size_t>(ch) * m + src]);
                }
        }
    if (channels == 1)
        write_pgm(path, width, height, pixels);
    else
        write_ppm(path, width, height, pixels);
}

} // namespace sam
