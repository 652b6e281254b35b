#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>

#include "sam/dataset.hpp"

namespace sam {

/// Variance floor for the Gaussian noise model; keeps perfect fits from
/// collapsing sigma^2 to zero.
inline constexpr double kSigma2Floor = 1e-6;

/// Everything that parameterises a model fit. In shared mode one latent
/// vector of length K = K_a = K_v drives both bases; in split mode z is the
/// concatenation [z_appearance; z_shape] with K = K_a + K_v, and the latent
/// precision stays a full K x K matrix either way.
struct HyperParams {
    int K_a = 0;
    int K_v = 0;
    bool shared_latents = true;
    std::array<double, 5> omega_v{1e-3, 0.0, 16.0, 1.0, 1.0};
    std::array<double, 3> omega_a{1.0, 0.0, 0.0};
    std::array<double, 3> omega_mu{1e-4, 0.1, 0.1};
    double lambda1 = 1.0;
    double lambda2 = 0.0;
    double nu0 = 0.0;             // <= 0 means "use K"
    Eigen::MatrixXd Lambda0;      // empty means I / nu0
    int t_steps = 8;
    int em_iters = 10;
    DataKind kind = DataKind::continuous;

    int total_latents() const { return shared_latents ? K_a : K_a + K_v; }

    double effective_nu0() const {
        return nu0 > 0.0 ? nu0 : static_cast<double>(total_latents());
    }

    Eigen::MatrixXd effective_lambda0() const {
        if (Lambda0.size() > 0) return Lambda0;
        const int k = total_latents();
        return Eigen::MatrixXd::Identity(k, k) / effective_nu0();
    }
};

/// Validate every HyperParams invariant; throws Error naming the violated
/// constraint.
void validate_hyper(const HyperParams& h);

} // namespace sam
