#include "sam/dataset.hpp"

#include <cmath>

#include "sam/error.hpp"

namespace sam {

std::string to_string(DataKind k) {
    switch (k) {
        case DataKind::continuous: return "continuous";
        case DataKind::binary: return "binary";
        case DataKind::categorical: return "categorical";
    }
    return "?";
}

DataKind data_kind_from_string(const std::string& s) {
    if (s == "continuous" || s == "gaussian") return DataKind::continuous;
    if (s == "binary" || s == "bernoulli") return DataKind::binary;
    if (s == "categorical") return DataKind::categorical;
    throw Error("unknown data kind '" + s + "' (continuous|binary|categorical)");
}

ImageDataset make_dataset(const Grid& grid, int n_images, int channels, DataKind kind) {
    if (n_images < 1) throw Error("make_dataset: need at least one image");
    if (channels < 1) throw Error("make_dataset: need at least one channel");
    if (kind == DataKind::categorical && channels < 2)
        throw Error("make_dataset: categorical data needs at least two channels");
    ImageDataset ds;
    ds.grid = grid;
    ds.n_images = n_images;
    ds.channels = channels;
    ds.kind = kind;
    ds.values.assign(static_cast<std::size_t>(n_images) * channels * grid.voxels(), 0.0f);
    ds.mask.assign(static_cast<std::size_t>(n_images) * grid.voxels(), 1);
    return ds;
}

void normalise_missing(ImageDataset& ds) {
    const std::int64_t m = ds.voxels();
    for (int n = 0; n < ds.n_images; ++n) {
        const float* img = ds.image(n);
        std::uint8_t* msk = ds.image_mask(n);
        for (std::int64_t v = 0; v < m; ++v)
            for (int c = 0; c < ds.channels; ++c)
                if (std::isnan(img[static_cast<std::size_t>(c) * m + v])) {
                    msk[v] = 0;
                    break;
                }
    }
}

void validate_dataset(const ImageDataset& ds) {
    const std::int64_t m = ds.voxels();
    if (ds.values.size() != static_cast<std::size_t>(ds.n_images) * ds.channels * m)
        throw Error("dataset: payload size mismatch");
    if (ds.mask.size() != static_cast<std::size_t>(ds.n_images) * m)
        throw Error("dataset: mask size mismatch");
    for (int n = 0; n < ds.n_images; ++n) {
        const float* img = ds.image(n);
        const std::uint8_t* msk = ds.image_mask(n);
        for (std::int64_t v = 0; v < m; ++v) {
            if (!msk[v]) continue;
            double sum = 0.0;
            for (int c = 0; c < ds.channels; ++c) {
                const double x = img[static_cast<std::size_t>(c) * m + v];
                if (std::isnan(x))
                    throw Error("dataset: NaN at an observed voxel (image " + std::to_string(n) +
                                "); run normalise_missing first");
                if (ds.kind == DataKind::binary && (x < 0.0 || x > 1.0))
                    throw Error("dataset: binary values must lie in [0,1], image " +
                                std::to_string(n) + " has " + std::to_string(x));
                if (ds.kind == DataKind::categorical && x < 0.0)
                    throw Error("dataset: categorical values must be non-negative");
                sum += x;
            }
            if (ds.kind == DataKind::categorical && std::abs(sum - 1.0) > 1e-5)
                throw Error("dataset: categorical channels must sum to 1 (got " +
                            std::to_string(sum) + " at image " + std::to_string(n) + ")");
        }
    }
}

std::vector<std::vector<std::uint8_t>> mask_random_rectangles(ImageDataset& ds, double fraction,
                                                              std::uint64_t seed) {
    if (fraction <= 0.0 || fraction >= 1.0)
        throw Error("mask_random_rectangles: fraction must lie in (0,1)");
    const Grid& g = ds.grid;
    const std::int64_t m = g.voxels();
    const double side = std::pow(fraction, 1.0 / g.nd);
    int ext[3] = {1, 1, 1};
    for (int d = 0; d < g.nd; ++d) {
        ext[d] = std::max(1, static_cast<int>(std::lround(side * g.n[d])));
        ext[d] = std::min(ext[d], g.n[d]);
    }
    std::vector<std::vector<std::uint8_t>> removed(ds.n_images);
    for (int n = 0; n < ds.n_images; ++n) {
        Rng rng(mix64(seed, static_cast<std::uint64_t>(n)));
        int origin[3] = {0, 0, 0};
        for (int d = 0; d < g.nd; ++d)
            origin[d] = static_cast<int>(rng.uniform() * g.n[d]);
        std::vector<std::uint8_t> rect(static_cast<std::size_t>(m), 0);
        for (int a = 0; a < ext[0]; ++a)
            for (int b = 0; b < ext[1]; ++b)
                for (int c = 0; c < (g.nd == 3 ? ext[2] : 1); ++c) {
                    const int i0 = wrap_index(origin[0] + a, g.n[0]);
                    const int i1 = wrap_index(origin[1] + b, g.n[1]);
                    const int i2 = g.nd == 3 ? wrap_index(origin[2] + c, g.n[2]) : 0;
                    rect[static_cast<std::size_t>(g.index(i0, i1, i2))] = 1;
                }
        std::uint8_t* msk = ds.image_mask(n);
        std::vector<std::uint8_t> held(static_cast<std::size_t>(m), 0);
        for (std::int64_t v = 0; v < m; ++v)
            if (rect[v]) {
                if (msk[v]) held[v] = 1; // only previously observed voxels count as ground truth
                msk[v] = 0;
            }
        removed[n] = std::move(held);
    }
    return removed;
}

ImageDataset slice_dataset(const ImageDataset& ds, int first, int count) {
    if (first < 0 || count < 1 || first + count > ds.n_images)
        throw Error("slice_dataset: range out of bounds");
    ImageDataset out = make_dataset(ds.grid, count, ds.channels, ds.kind);
    const std::size_t vstride = static_cast<std::size_t>(ds.channels) * ds.voxels();
    const std::size_t mstride = static_cast<std::size_t>(ds.voxels());
    std::copy(ds.values.begin() + first * vstride, ds.values.begin() + (first + count) * vstride,
              out.values.begin());
    std::copy(ds.mask.begin() + first * mstride, ds.mask.begin() + (first + count) * mstride,
              out.mask.begin());
    return out;
}

} // namespace sam
