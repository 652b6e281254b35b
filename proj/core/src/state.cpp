#include "sam/state.hpp"

#include <string>

#include "sam/accum.hpp"
#include "sam/error.hpp"
#include "sam/rng.hpp"

namespace sam {

void validate_hyper(const HyperParams& h) {
    if (h.shared_latents && h.K_a != h.K_v)
        throw Error("validate_hyper: shared latents require K_a == K_v");
    if (h.K_a < 0 || h.K_v < 0) throw Error("validate_hyper: basis counts must be >= 0");
    if (h.total_latents() < 1) throw Error("validate_hyper: need at least one latent variable");
    if (h.omega_v[0] <= 0.0)
        throw Error("validate_hyper: omega_v[0] must be positive; Green's function undefined");
    for (int i = 0; i < 5; ++i)
        if (h.omega_v[i] < 0.0)
            throw Error("validate_hyper: omega_v[" + std::to_string(i) + "] must be >= 0");
    for (int i = 0; i < 3; ++i) {
        if (h.omega_a[i] < 0.0)
            throw Error("validate_hyper: omega_a[" + std::to_string(i) + "] must be >= 0");
        if (h.omega_mu[i] < 0.0)
            throw Error("validate_hyper: omega_mu[" + std::to_string(i) + "] must be >= 0");
    }
    if (h.lambda1 < 0.0 || h.lambda2 < 0.0)
        throw Error("validate_hyper: lambda weights must be >= 0");
    if (h.lambda1 + h.lambda2 <= 0.0)
        throw Error("validate_hyper: lambda1 + lambda2 must be positive");
    const int k = h.total_latents();
    if (h.effective_nu0() < static_cast<double>(k))
        throw Error("validate_hyper: nu0 must be >= K so the Wishart prior is normalisable");
    if (h.Lambda0.size() > 0) {
        if (h.Lambda0.rows() != k || h.Lambda0.cols() != k)
            throw Error("validate_hyper: Lambda0 must be K x K");
        if (!h.Lambda0.isApprox(h.Lambda0.transpose(), 1e-12))
            throw Error("validate_hyper: Lambda0 must be symmetric");
        Eigen::LLT<Eigen::MatrixXd> llt(h.Lambda0);
        if (llt.info() != Eigen::Success)
            throw Error("validate_hyper: Lambda0 must be positive definite");
    }
    if (h.t_steps < 1) throw Error("validate_hyper: t_steps must be >= 1");
    if (h.em_iters < 0) throw Error("validate_hyper: em_iters must be >= 0");
}

std::vector<double> ModelState::appearance(const Eigen::VectorXd& z) const {
    std::vector<double> a = mu;
    const std::size_t s = wa_stride();
    for (int k = 0; k < hyper.K_a; ++k) {
        const double zk = z[z_index_a(k)];
        const double* col = wa_col(k);
        for (std::size_t i = 0; i < s; ++i) a[i] += zk * col[i];
    }
    return a;
}

std::vector<double> ModelState::velocity(const Eigen::VectorXd& z) const {
    std::vector<double> v(wv_stride(), 0.0);
    for (int k = 0; k < hyper.K_v; ++k) {
        const double zk = z[z_index_v(k)];
        const double* col = wv_col(k);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += zk * col[i];
    }
    return v;
}

ModelState make_initial_model(const Grid& grid, int channels, const HyperParams& hyper) {
    validate_hyper(hyper);
    ModelState m;
    m.grid = grid;
    m.channels = channels;
    m.hyper = hyper;
    m.mu.assign(static_cast<std::size_t>(channels) * grid.voxels(), 0.0);
    m.W_a.assign(static_cast<std::size_t>(hyper.K_a) * m.wa_stride(), 0.0);
    m.W_v.assign(static_cast<std::size_t>(hyper.K_v) * m.wv_stride(), 0.0);
    m.A_hat = hyper.effective_nu0() * hyper.effective_lambda0();
    m.sigma2.assign(static_cast<std::size_t>(channels), 1.0);
    return m;
}

Eigen::VectorXd init_gaussian_column(int k, std::uint64_t seed, std::int64_t column) {
    Rng rng(mix64(seed, static_cast<std::uint64_t>(column)));
    Eigen::VectorXd g(k);
    for (int i = 0; i < k; ++i) g[i] = rng.gaussian();
    return g;
}

Eigen::MatrixXd gram_whitener(const Eigen::MatrixXd& gram, int n_images) {
    const int k = static_cast<int>(gram.rows());
    if (k > n_images)
        throw Error("init_latents: cannot orthonormalise " + std::to_string(k) +
                    " latent rows from " + std::to_string(n_images) + " images (K > N)");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    if (eig.info() != Eigen::Success) throw Error("init_latents: eigendecomposition failed");
    const double tiny = 1e-12 * eig.eigenvalues().maxCoeff();
    if (eig.eigenvalues().minCoeff() <= tiny)
        throw Error("init_latents: random Gram matrix is rank deficient");
    return eig.eigenvectors() * eig.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
           eig.eigenvectors().transpose();
}

LatentState init_latents(int n_images, int k, std::uint64_t seed) {
    if (n_images < 1 || k < 1) throw Error("init_latents: need N >= 1 and K >= 1");

    Eigen::MatrixXd g(k, n_images);
    for (int n = 0; n < n_images; ++n) g.col(n) = init_gaussian_column(k, seed, n);

    // per-entry exact sums so the Gram matrix matches the sharded computation
    std::vector<ExactSum> gram(static_cast<std::size_t>(k) * k);
    for (int n = 0; n < n_images; ++n)
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) gram[i * k + j].add(g(i, n) * g(j, n));
    Eigen::MatrixXd gg(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) gg(i, j) = gram[i * k + j].value();

    const Eigen::MatrixXd w = gram_whitener(gg, n_images);

    LatentState ls;
    ls.Z.resize(k, n_images);
    for (int n = 0; n < n_images; ++n) ls.Z.col(n) = w * g.col(n);
    ls.S = Eigen::MatrixXd::Zero(k, k);

    std::vector<ExactSum> cz(static_cast<std::size_t>(k) * k);
    for (int n = 0; n < n_images; ++n)
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) cz[i * k + j].add(ls.Z(i, n) * ls.Z(j, n));
    ls.C_z.resize(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) ls.C_z(i, j) = cz[i * k + j].value();
    return ls;
}

} // namespace sam
