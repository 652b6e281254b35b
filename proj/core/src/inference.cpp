#include "sam/inference.hpp"

#include <cmath>
#include <numbers>

#include "sam/error.hpp"
#include "sam/rng.hpp"

namespace sam {

namespace {

double logdet_spd(const Eigen::MatrixXd& a, const char* who) {
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success)
        throw Error(std::string(who) + ": matrix is not positive definite");
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

} // namespace

InferenceContext::InferenceContext(const ModelState& model) : model_(model) {
    validate_hyper(model_.hyper);
    cfg_ = engine_config_from(model_.hyper);
    emodel_ = engine_model_from(model_);
    prec_ = regularised_precision(model_);
    if (model_.K() > 0) {
        logdet_p_ = logdet_spd(prec_.P, "InferenceContext");
    }
    eval_ = std::make_unique<ImageEvaluator>(model_.grid, model_.channels, cfg_, emodel_);
}

Posterior fit(const InferenceContext& ctx, const float* image, const std::uint8_t* mask,
              int max_gn_iters) {
    const int k = ctx.model().K();
    const ImageEvaluator& ev = ctx.evaluator();
    const Eigen::MatrixXd& p = ctx.P();

    Posterior post;
    post.z_hat = Eigen::VectorXd::Zero(k);
    if (k == 0) {
        post.hessian.resize(0, 0);
        post.neg_log_joint = ev.stats(image, mask, post.z_hat).J;
        return post;
    }

    Eigen::VectorXd z = Eigen::VectorXd::Zero(k);
    double j = ev.stats(image, mask, z).J; // quadratic term is zero at z = 0
    if (!std::isfinite(j)) throw Error("fit: objective is not finite at z = 0");

    constexpr int kMaxHalvings = 6;
    for (int it = 0; it < max_gn_iters; ++it) {
        ImageEvaluator::LatentSystem sys = ev.latent_system(image, mask, z);
        Eigen::LDLT<Eigen::MatrixXd> ldlt(sys.H + p);
        if (ldlt.info() != Eigen::Success) throw Error("fit: singular (H + P)");
        const Eigen::VectorXd step = ldlt.solve(sys.g + p * z);

        bool accepted = false;
        double alpha = 1.0;
        for (int h = 0; h <= kMaxHalvings; ++h, alpha *= 0.5) {
            const Eigen::VectorXd zc = z - alpha * step;
            const double jc = ev.stats(image, mask, zc).J + 0.5 * zc.dot(p * zc);
            if (!std::isfinite(jc)) throw Error("fit: objective diverged to a non-finite value");
            if (jc <= j) {
                z = zc;
                j = jc;
                accepted = true;
                break;
            }
        }
        if (!accepted) break; // no descent direction left: converged
        if (alpha * step.norm() < 1e-6) break;
    }

    ImageEvaluator::LatentSystem sys = ev.latent_system(image, mask, z);
    post.z_hat = z;
    post.hessian = sys.H + p;
    post.neg_log_joint = j;
    return post;
}

double log_evidence(const InferenceContext& ctx, const Posterior& post) {
    const int k = ctx.model().K();
    if (k == 0) return -post.neg_log_joint;
    // ln p(f, z) = -J - z'Pz/2 - (K/2) ln 2pi + (1/2) ln|P|; the Laplace
    // integral contributes +(K/2) ln 2pi - (1/2) ln|H + P|, so the 2pi
    // factors cancel
    const double logdet_h = logdet_spd(post.hessian, "log_evidence");
    return -post.neg_log_joint + 0.5 * ctx.logdet_P() - 0.5 * logdet_h;
}

std::vector<double> classify(const std::vector<const InferenceContext*>& models,
                             const float* image, const std::uint8_t* mask,
                             const std::vector<double>& priors, int max_gn_iters) {
    if (models.empty()) throw Error("classify: need at least one model");
    if (priors.size() != models.size())
        throw Error("classify: need one prior per model");
    double psum = 0.0;
    for (double p : priors) {
        if (p < 0.0) throw Error("classify: priors must be non-negative");
        psum += p;
    }
    if (std::abs(psum - 1.0) > 1e-6) throw Error("classify: priors must sum to 1");
    for (std::size_t i = 1; i < models.size(); ++i) {
        if (models[i]->model().grid != models[0]->model().grid ||
            models[i]->model().hyper.kind != models[0]->model().hyper.kind)
            throw Error("classify: models must share grid and kind");
    }

    std::vector<double> score(models.size());
    for (std::size_t i = 0; i < models.size(); ++i) {
        if (priors[i] == 0.0) {
            score[i] = -std::numeric_limits<double>::infinity();
            continue;
        }
        const Posterior post = fit(*models[i], image, mask, max_gn_iters);
        score[i] = log_evidence(*models[i], post) + std::log(priors[i]);
    }
    const double smax = *std::max_element(score.begin(), score.end());
    double z = 0.0;
    std::vector<double> out(models.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(score[i] - smax);
        z += out[i];
    }
    for (double& o : out) o /= z;
    return out;
}

std::vector<double> reconstruct(const InferenceContext& ctx, const Eigen::VectorXd& z) {
    const ImageEvaluator& ev = ctx.evaluator();
    if (z.size() != ctx.model().K()) throw Error("reconstruct: z length must be K");
    const std::vector<double> a = ev.appearance(z);
    const Deformation psi = ev.deformation(z);
    const std::vector<double> aw = pull(ctx.model().grid, a, ctx.model().channels, psi.psi);
    return squash(ev.noise(), ctx.model().grid, ctx.model().channels, aw);
}

Eigen::VectorXd sample_latent(const ModelState& model, std::uint64_t seed) {
    const int k = model.K();
    Eigen::LLT<Eigen::MatrixXd> llt(model.A_hat);
    if (llt.info() != Eigen::Success) throw Error("sample: A is not positive definite");
    Rng rng(seed);
    Eigen::VectorXd g(k);
    for (int i = 0; i < k; ++i) g[i] = rng.gaussian();
    // z = L^-T g has covariance (L L^T)^-1 = A^-1
    return llt.matrixU().solve(g);
}

std::vector<double> sample_image(const InferenceContext& ctx, std::uint64_t seed) {
    return reconstruct(ctx, sample_latent(ctx.model(), seed));
}

std::vector<float> impute(const InferenceContext& ctx, const float* image,
                          const std::uint8_t* mask) {
    const std::int64_t m = ctx.model().grid.voxels();
    const int c = ctx.model().channels;
    const Posterior post = fit(ctx, image, mask);
    const std::vector<double> recon = reconstruct(ctx, post.z_hat);
    std::vector<float> out(static_cast<std::size_t>(c) * m);
    for (std::int64_t v = 0; v < m; ++v)
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t i = static_cast<std::size_t>(ch) * m + v;
            out[i] = mask[v] ? image[i] : static_cast<float>(recon[i]);
        }
    return out;
}

double heldout_loglik(const InferenceContext& ctx, const float* image,
                      const std::uint8_t* train_mask, const std::uint8_t* eval_mask) {
    const std::int64_t m = ctx.model().grid.voxels();
    bool any_eval = false;
    for (std::int64_t v = 0; v < m; ++v) {
        if (train_mask[v] && eval_mask[v])
            throw Error("heldout_loglik: masks must be disjoint");
        any_eval = any_eval || eval_mask[v] != 0;
    }
    if (!any_eval) throw Error("heldout_loglik: eval mask is empty");

    const Posterior post = fit(ctx, image, train_mask);
    const ImageEvaluator& ev = ctx.evaluator();
    const std::vector<double> a = ev.appearance(post.z_hat);
    const Deformation psi = ev.deformation(post.z_hat);
    const std::vector<double> aw = pull(ctx.model().grid, a, ctx.model().channels, psi.psi);
    return -energy(ev.noise(), ctx.model().grid, ctx.model().channels, image, aw, eval_mask);
}

} // namespace sam
