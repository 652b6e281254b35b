#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sam/error.hpp"

namespace sam {

/// Periodic voxel grid, 2-D or 3-D. Linear indices are C-order with the
/// last axis fastest, matching the on-disk payload layout.
struct Grid {
    int nd = 0;                    // number of axes, 2 or 3
    std::array<int, 3> n{1, 1, 1}; // voxel counts; n[d] == 1 for d >= nd

    Grid() = default;
    Grid(std::initializer_list<int> dims) : Grid(std::vector<int>(dims)) {}
    explicit Grid(const std::vector<int>& dims) {
        if (dims.size() != 2 && dims.size() != 3)
            throw Error("Grid: dimensionality must be 2 or 3, got " + std::to_string(dims.size()));
        nd = static_cast<int>(dims.size());
        for (int d = 0; d < nd; ++d) {
            if (dims[d] < 4)
                throw Error("Grid: every axis needs at least 4 voxels, axis " +
                            std::to_string(d) + " has " + std::to_string(dims[d]));
            n[d] = dims[d];
        }
    }

    std::int64_t voxels() const {
        return static_cast<std::int64_t>(n[0]) * n[1] * n[2];
    }

    std::int64_t index(int i0, int i1, int i2 = 0) const {
        return (static_cast<std::int64_t>(i0) * n[1] + i1) * n[2] + i2;
    }

    bool operator==(const Grid& o) const { return nd == o.nd && n == o.n; }
    bool operator!=(const Grid& o) const { return !(*this == o); }

    std::vector<int> dims() const {
        return std::vector<int>(n.begin(), n.begin() + nd);
    }

    std::string describe() const {
        std::string s = std::to_string(n[0]);
        for (int d = 1; d < nd; ++d) s += "x" + std::to_string(n[d]);
        return s;
    }
};

/// Wrap an integer coordinate onto the grid axis.
inline int wrap_index(int i, int n) {
    int r = i % n;
    return r < 0 ? r + n : r;
}

} // namespace sam
