#pragma once

#include <Eigen/Dense>
#include <vector>

#include "sam/hyper.hpp"

namespace sam {

/// Learned model: mean, appearance basis, velocity basis, latent precision
/// and (Gaussian kind) per-channel noise variances.
struct ModelState {
    Grid grid;
    int channels = 1;
    HyperParams hyper;
    std::vector<double> mu;   // C * M
    std::vector<double> W_a;  // K_a columns, each C * M, column-contiguous
    std::vector<double> W_v;  // K_v columns, each D * M
    Eigen::MatrixXd A_hat;    // K x K
    std::vector<double> sigma2;

    int K() const { return hyper.total_latents(); }
    std::int64_t voxels() const { return grid.voxels(); }

    std::size_t wa_stride() const { return static_cast<std::size_t>(channels) * grid.voxels(); }
    std::size_t wv_stride() const { return static_cast<std::size_t>(grid.nd) * grid.voxels(); }
    const double* wa_col(int k) const { return W_a.data() + k * wa_stride(); }
    double* wa_col(int k) { return W_a.data() + k * wa_stride(); }
    const double* wv_col(int k) const { return W_v.data() + k * wv_stride(); }
    double* wv_col(int k) { return W_v.data() + k * wv_stride(); }

    // z index driven by appearance column k / shape column k
    int z_index_a(int k) const { return k; }
    int z_index_v(int k) const { return hyper.shared_latents ? k : hyper.K_a + k; }

    /// mu + W_a z (appearance part of z)
    std::vector<double> appearance(const Eigen::VectorXd& z) const;
    /// W_v z (shape part of z)
    std::vector<double> velocity(const Eigen::VectorXd& z) const;
};

/// Zero-initialised model: mu = W = 0, A = nu0 * Lambda0 (the prior mean),
/// sigma2 = 1.
ModelState make_initial_model(const Grid& grid, int channels, const HyperParams& hyper);

/// Latent summary carried between EM phases: the point estimates Z (K x N),
/// the accumulated posterior covariance S and the second moment C_z = Z Z^T.
struct LatentState {
    Eigen::MatrixXd Z;
    Eigen::MatrixXd S;
    Eigen::MatrixXd C_z;
};

/// Random initialisation with exactly orthonormal rows: Z = (G G^T)^(-1/2) G
/// where column n of G is drawn from a stream seeded by (seed, n). Seeding
/// per column keeps the initialisation identical however the images are
/// sharded across workers. Throws if K > N.
LatentState init_latents(int n_images, int k, std::uint64_t seed);

/// The whitening transform (G G^T)^(-1/2) used by init_latents, exposed so
/// the distributed master can reproduce the same initialisation from an
/// aggregated Gram matrix.
Eigen::MatrixXd gram_whitener(const Eigen::MatrixXd& gram, int n_images);

/// Column n of the raw initialisation matrix G.
Eigen::VectorXd init_gaussian_column(int k, std::uint64_t seed, std::int64_t column);

} // namespace sam
