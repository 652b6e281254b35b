#pragma once

#include <Eigen/Dense>
#include <memory>
#include <vector>

#include "sam/engine.hpp"
#include "sam/trainer.hpp"

namespace sam {

/// Laplace posterior of the latent code of one image: the mode, the Hessian
/// H + P at the mode, and the negated joint value J(f, z) + 1/2 z' P z.
struct Posterior {
    Eigen::VectorXd z_hat;
    Eigen::MatrixXd hessian;
    double neg_log_joint = 0.0;
};

/// Per-model state reused across fits: kernels, the regularised latent
/// precision P = lambda1 A + lambda2 C and its log determinant.
class InferenceContext {
public:
    explicit InferenceContext(const ModelState& model);

    const ModelState& model() const { return model_; }
    const Eigen::MatrixXd& P() const { return prec_.P; }
    double logdet_P() const { return logdet_p_; }
    const ImageEvaluator& evaluator() const { return *eval_; }

private:
    ModelState model_;
    EngineConfig cfg_;
    EngineModel emodel_;
    RegularisedPrecision prec_;
    double logdet_p_ = 0.0;
    std::unique_ptr<ImageEvaluator> eval_;
};

/// Gauss-Newton fit of the latent code from z = 0: iterate until the
/// accepted step norm drops below 1e-6 or max_gn_iters is reached.
Posterior fit(const InferenceContext& ctx, const float* image, const std::uint8_t* mask,
              int max_gn_iters = 20);

/// Laplace log evidence ln p(f, z_hat | M) + (K/2) ln 2pi - 1/2 ln|H + P|,
/// with the latent prior normaliser included in the joint.
double log_evidence(const InferenceContext& ctx, const Posterior& post);

/// Posterior model probabilities: softmax over log-evidence + log-prior.
std::vector<double> classify(const std::vector<const InferenceContext*>& models,
                             const float* image, const std::uint8_t* mask,
                             const std::vector<double>& priors, int max_gn_iters = 20);

/// squash(pull(mu + W_a z, shoot(W_v z))).
std::vector<double> reconstruct(const InferenceContext& ctx, const Eigen::VectorXd& z);

/// Draw z ~ N(0, A^-1), deterministic per seed.
Eigen::VectorXd sample_latent(const ModelState& model, std::uint64_t seed);
std::vector<double> sample_image(const InferenceContext& ctx, std::uint64_t seed);

/// Fit on the observed voxels, then return the image with masked voxels
/// replaced by the reconstruction. Observed voxels pass through untouched.
std::vector<float> impute(const InferenceContext& ctx, const float* image,
                          const std::uint8_t* mask);

/// Fit on train_mask voxels, evaluate the (negated) energy on eval_mask
/// voxels only. Masks must be disjoint and eval_mask non-empty.
double heldout_loglik(const InferenceContext& ctx, const float* image,
                      const std::uint8_t* train_mask, const std::uint8_t* eval_mask);

} // namespace sam
