// Test-only helpers: dense finite-difference oracles, random fields and the
// synthetic blob datasets used across the suites. Everything here is kept
// independent of the implementation paths it checks.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "sam/dataset.hpp"
#include "sam/grid.hpp"
#include "sam/rng.hpp"

namespace testsup {

// Dense periodic central-difference matrix along one axis.
inline Eigen::MatrixXd difference_matrix(const sam::Grid& g, int axis) {
    const int m = static_cast<int>(g.voxels());
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(m, m);
    for (int i0 = 0; i0 < g.n[0]; ++i0)
        for (int i1 = 0; i1 < g.n[1]; ++i1)
            for (int i2 = 0; i2 < g.n[2]; ++i2) {
                const int row = static_cast<int>(g.index(i0, i1, i2));
                int up[3] = {i0, i1, i2}, dn[3] = {i0, i1, i2};
                up[axis] = sam::wrap_index(up[axis] + 1, g.n[axis]);
                dn[axis] = sam::wrap_index(dn[axis] - 1, g.n[axis]);
                d(row, g.index(up[0], up[1], up[2])) += 0.5;
                d(row, g.index(dn[0], dn[1], dn[2])) -= 0.5;
            }
    return d;
}

inline Eigen::MatrixXd scalar_operator_matrix(const sam::Grid& g,
                                              const std::array<double, 3>& w) {
    const int m = static_cast<int>(g.voxels());
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(m, m);
    for (int d = 0; d < g.nd; ++d) {
        const Eigen::MatrixXd dm = difference_matrix(g, d);
        b += dm.transpose() * dm;
    }
    return w[0] * Eigen::MatrixXd::Identity(m, m) + w[1] * b + w[2] * b * b;
}

inline Eigen::MatrixXd vector_operator_matrix(const sam::Grid& g,
                                              const std::array<double, 5>& w) {
    const int m = static_cast<int>(g.voxels());
    const int nd = g.nd;
    std::vector<Eigen::MatrixXd> diff(nd);
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(m, m);
    for (int d = 0; d < nd; ++d) {
        diff[d] = difference_matrix(g, d);
        b += diff[d].transpose() * diff[d];
    }
    const Eigen::MatrixXd iso = w[0] * Eigen::MatrixXd::Identity(m, m) + w[1] * b + w[2] * b * b +
                                0.5 * w[3] * b;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(nd * m, nd * m);
    for (int i = 0; i < nd; ++i)
        for (int j = 0; j < nd; ++j) {
            Eigen::MatrixXd blk = (0.5 * w[3] + w[4]) * diff[i].transpose() * diff[j];
            if (i == j) blk += iso;
            out.block(i * m, j * m, m, m) = blk;
        }
    return out;
}

inline std::vector<double> random_field(std::size_t n, sam::Rng& rng, double scale = 1.0) {
    std::vector<double> f(n);
    for (double& x : f) x = scale * rng.gaussian();
    return f;
}

// Gaussian blob with per-image translation, log-size and brightness factors.
// Brightness correlates with size through the shared factor, so both the
// shape and appearance parts of a model have something to explain.
struct BlobParams {
    double cx, cy;    // centre offset in voxels
    double log_size;  // radius multiplier exp(log_size)
    double bright;    // peak intensity
};

inline BlobParams blob_params(sam::Rng& rng) {
    BlobParams p;
    p.cx = 3.0 * (2.0 * rng.uniform() - 1.0);
    p.cy = 3.0 * (2.0 * rng.uniform() - 1.0);
    p.log_size = 0.25 * (2.0 * rng.uniform() - 1.0);
    p.bright = 0.7 + 0.25 * (2.0 * rng.uniform() - 1.0) + 0.3 * p.log_size;
    return p;
}

inline void render_blob(float* img, const sam::Grid& g, const BlobParams& p,
                        double noise_sd, sam::Rng& rng) {
    const double r0 = 5.0 * std::exp(p.log_size);
    const double cx = g.n[0] / 2.0 + p.cx;
    const double cy = g.n[1] / 2.0 + p.cy;
    for (int i = 0; i < g.n[0]; ++i)
        for (int j = 0; j < g.n[1]; ++j) {
            const double dx = i - cx, dy = j - cy;
            const double r2 = (dx * dx + dy * dy) / (r0 * r0);
            double v = p.bright * std::exp(-0.5 * r2);
            if (noise_sd > 0.0) v += noise_sd * rng.gaussian();
            img[g.index(i, j)] = static_cast<float>(v);
        }
}

inline sam::ImageDataset blob_dataset(int n_images, int side, std::uint64_t seed,
                                      double noise_sd = 0.01) {
    const sam::Grid g{side, side};
    sam::ImageDataset ds = sam::make_dataset(g, n_images, 1, sam::DataKind::continuous);
    for (int n = 0; n < n_images; ++n) {
        sam::Rng rng(sam::mix64(seed, n));
        render_blob(ds.image(n), g, blob_params(rng), noise_sd, rng);
    }
    return ds;
}

// Best rank-k linear reconstruction MSE (PCA oracle via the N x N Gram
// trick, solved with Eigen's self-adjoint solver).
inline double pca_reconstruction_mse(const sam::ImageDataset& ds, int rank) {
    const int n = ds.n_images;
    const int m = static_cast<int>(ds.voxels()) * ds.channels;
    Eigen::MatrixXd x(m, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) x(j, i) = ds.image(i)[j];
    const Eigen::VectorXd mean = x.rowwise().mean();
    x.colwise() -= mean;
    const Eigen::MatrixXd gram = x.transpose() * x;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    // columns of x * v / sqrt(lambda) are the principal directions
    double captured = 0.0;
    for (int i = 0; i < rank; ++i) captured += std::max(eig.eigenvalues()[n - 1 - i], 0.0);
    const double total = x.squaredNorm();
    return (total - captured) / (static_cast<double>(m) * n);
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

} // namespace testsup
