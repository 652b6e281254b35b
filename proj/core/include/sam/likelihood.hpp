#pragma once

#include <cstdint>
#include <vector>

#include "sam/dataset.hpp"
#include "sam/diffeo.hpp"
#include "sam/operators.hpp"

namespace sam {

/// Noise model attached to a dataset kind. sigma2 is per channel and only
/// meaningful for the Gaussian kind.
struct NoiseModel {
    DataKind kind = DataKind::continuous;
    std::vector<double> sigma2;
};

/// Negative log-likelihood of one image given its warped reconstruction,
/// summed over observed voxels only. Throws on NaN in a_warped.
double energy(const NoiseModel& model, const Grid& grid, int channels, const float* f,
              const std::vector<double>& a_warped, const std::uint8_t* mask);

/// Energy, gradient and diagonal-approximation Hessian for one image.
/// g is the gradient with respect to the un-warped appearance a (residuals
/// are zeroed at unobserved voxels, then pushed back through Psi^T). H holds
/// the pushed per-voxel weights: a scalar per channel for Gaussian and
/// Bernoulli, a full C x C block per voxel for categorical.
struct LikelihoodDerivs {
    double J = 0.0;
    std::vector<double> g; // C * M, template space
    BlockField H;
};

/// Energy plus the Gaussian sufficient statistics of one image: per-channel
/// raw residual sums of squares and the observed-voxel count.
struct EnergyStats {
    double J = 0.0;
    std::vector<double> rss;
    std::int64_t observed = 0;
};

EnergyStats energy_stats(const NoiseModel& model, const Grid& grid, int channels, const float* f,
                         const std::vector<double>& a_warped, const std::uint8_t* mask);

LikelihoodDerivs derivatives(const NoiseModel& model, const Grid& grid, int channels,
                             const float* f, const std::vector<double>& a, const Deformation& psi,
                             const std::uint8_t* mask);

/// Identity (Gaussian), elementwise logistic sigmoid (Bernoulli) or
/// per-voxel softmax with max subtraction (categorical).
std::vector<double> squash(const NoiseModel& model, const Grid& grid, int channels,
                           const std::vector<double>& a);

/// Maximum-likelihood per-channel variance over observed voxels, floored at
/// kSigma2Floor. recons[n] is the warped reconstruction of image n.
std::vector<double> update_sigma2(const ImageDataset& ds,
                                  const std::vector<std::vector<double>>& recons);

double sigmoid(double x);
double softplus(double x);

} // namespace sam
