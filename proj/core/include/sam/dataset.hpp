#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sam/grid.hpp"
#include "sam/rng.hpp"

namespace sam {

enum class DataKind { continuous, binary, categorical };

std::string to_string(DataKind k);
DataKind data_kind_from_string(const std::string& s);

/// N images on a common grid with a per-voxel observation mask. The mask is
/// authoritative; NaN payload values are an input convention that forces the
/// mask off at load/normalisation time.
struct ImageDataset {
    Grid grid;
    int n_images = 0;
    int channels = 1;
    DataKind kind = DataKind::continuous;
    std::vector<float> values;       // N * C * M
    std::vector<std::uint8_t> mask;  // N * M, 1 = observed

    std::int64_t voxels() const { return grid.voxels(); }

    const float* image(int n) const {
        return values.data() + static_cast<std::size_t>(n) * channels * voxels();
    }
    float* image(int n) {
        return values.data() + static_cast<std::size_t>(n) * channels * voxels();
    }
    const std::uint8_t* image_mask(int n) const {
        return mask.data() + static_cast<std::size_t>(n) * voxels();
    }
    std::uint8_t* image_mask(int n) {
        return mask.data() + static_cast<std::size_t>(n) * voxels();
    }
};

/// Allocate an all-observed, zero-valued dataset.
ImageDataset make_dataset(const Grid& grid, int n_images, int channels, DataKind kind);

/// Force mask = 0 wherever any channel is NaN. Called by the loader and by
/// make-style constructors before validation.
void normalise_missing(ImageDataset& ds);

/// Check the per-kind invariants (binary range, categorical channel sums,
/// NaN only at masked voxels). Throws on violation.
void validate_dataset(const ImageDataset& ds);

/// Blank out one wrapping rectangle per image covering `fraction` of its
/// area: dataset masks are cleared inside the rectangles and the removed
/// regions are returned (restricted to previously observed voxels) for
/// held-out evaluation.
std::vector<std::vector<std::uint8_t>> mask_random_rectangles(ImageDataset& ds, double fraction,
                                                              std::uint64_t seed);

/// Extract a contiguous range of images as a new dataset (sharding helper).
ImageDataset slice_dataset(const ImageDataset& ds, int first, int count);

} // namespace sam
