#pragma once

#include <Eigen/Dense>
#include <string>

#include "sam/dataset.hpp"
#include "sam/state.hpp"

namespace sam {

/// SAMD image container:
///   "SAMD" | u16 version=1 LE | u32 header_len LE | JSON header | payload.
/// Header: {"dims":[...],"n":N,"channels":C,"kind":"..."}. Payload is
/// N x C x M float32 little-endian, C-order with the last grid axis fastest;
/// NaN encodes missing. Loading then saving reproduces payload bytes.
ImageDataset read_samd(const std::string& path);
void write_samd(const std::string& path, const ImageDataset& ds);

/// SAMM model checkpoint: same framing with magic "SAMM"; the JSON header
/// enumerates named float64 arrays (mu, W_a, W_v, A_hat, sigma2, Lambda0)
/// with byte offsets and shapes, plus the hyper-parameters.
ModelState read_samm(const std::string& path);
void write_samm(const std::string& path, const ModelState& model);

/// Latent feature export in the SAMD framing: per image, channel 0 holds
/// z_hat and channel 1 the diagonal of the posterior Hessian H + P.
struct LatentFeatures {
    Eigen::MatrixXd z;         // K x N
    Eigen::MatrixXd hess_diag; // K x N
};
void write_latent_features(const std::string& path, const LatentFeatures& lf);
LatentFeatures read_latent_features(const std::string& path);

} // namespace sam
