#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <tuple>

#include "sam/engine.hpp"
#include "sam/state.hpp"

namespace sam {

/// The negated joint log-probability, decomposed into its named terms.
struct ObjectiveTerms {
    double data = 0.0;        // sum of per-image energies J
    double mu_prior = 0.0;    // 1/2 mu^T L_mu mu
    double basis_trace = 0.0; // (lambda1 N / 2) (Tr(Wa' La Wa) + Tr(Wv' Lv Wv))
    double wishart = 0.0;     // (lambda1/2) (Tr((C_z + Lambda0^-1) A) - (N+nu0-K-1) ln|A|)
    double strategy2 = 0.0;   // (lambda2/2) Tr(C_z C)
    double total() const { return data + mu_prior + basis_trace + wishart + strategy2; }
};

/// C = Wv' Lv Wv + Wa' La Wa embedded at the latent indices, and the
/// effective latent precision P = lambda1 A + lambda2 C.
struct RegularisedPrecision {
    Eigen::MatrixXd C;
    Eigen::MatrixXd P;
};

struct StepRecord {
    int iter = 0;
    std::string phase;
    double obj_before = 0.0;
    double obj_after = 0.0;
    int halvings = 0;
    bool accepted = false;
};

struct IterationLog {
    int iter = 0;
    double objective = 0.0; // evaluated after the latent update
    ObjectiveTerms terms;
    std::vector<double> sigma2;
    std::int64_t latent_halvings = 0;
    std::int64_t latent_rejected = 0;
    // orthogonalisation diagnostics
    double offdiag_zz = 0.0;  // offdiag/diag Frobenius ratio of T Z (T Z)^T
    double offdiag_c = 0.0;   // same for (T^-1)' C T^-1
    double data_before_transform = 0.0;
    double data_after_transform = 0.0;
};

struct TrainReport {
    std::vector<IterationLog> iterations;
    std::vector<StepRecord> steps;
};

struct TrainOptions {
    int threads = 1;
    std::function<void(const IterationLog&)> on_iteration;
};

// ---------------------------------------------------------------------------
// Backend: the aggregate-only view of a dataset the training loop runs
// against. LocalBackend wraps one in-process engine; the distributed master
// implements the same interface over the wire, so both execute the identical
// schedule.
// ---------------------------------------------------------------------------

struct ObjectiveStats {
    double J = 0.0;
    std::vector<double> rss;
    double observed = 0.0;
    std::int64_t halvings = 0;
    std::int64_t rejected = 0;
};

struct MeanAggregate {
    std::vector<double> g;
    BlockField H;
    ObjectiveStats stats;
};

struct BasisAggregate {
    std::vector<std::vector<double>> g;
    std::vector<BlockField> H;
    ObjectiveStats stats;
};

struct LatentAggregate {
    Eigen::MatrixXd S;
    Eigen::MatrixXd C_z;
    ObjectiveStats stats;
};

class Backend {
public:
    virtual ~Backend() = default;
    virtual Grid grid() const = 0;
    virtual int channels() const = 0;
    virtual DataKind kind() const = 0;
    virtual int n_total() const = 0;
    virtual void configure(const EngineConfig& cfg) = 0;
    virtual void broadcast_model(const EngineModel& model) = 0;
    virtual Eigen::MatrixXd init_gram(std::uint64_t seed, int k) = 0;
    virtual void transform_latents(const Eigen::MatrixXd& t) = 0;
    virtual MeanAggregate mean_derivatives() = 0;
    virtual BasisAggregate shape_derivatives() = 0;
    virtual BasisAggregate appearance_derivatives() = 0;
    virtual ObjectiveStats objective_stats() = 0;
    virtual LatentAggregate update_latents(const Eigen::MatrixXd& p) = 0;
};

class LocalBackend : public Backend {
public:
    LocalBackend(const ImageDataset& ds, int threads = 1);
    Grid grid() const override;
    int channels() const override;
    DataKind kind() const override;
    int n_total() const override;
    void configure(const EngineConfig& cfg) override;
    void broadcast_model(const EngineModel& model) override;
    Eigen::MatrixXd init_gram(std::uint64_t seed, int k) override;
    void transform_latents(const Eigen::MatrixXd& t) override;
    MeanAggregate mean_derivatives() override;
    BasisAggregate shape_derivatives() override;
    BasisAggregate appearance_derivatives() override;
    ObjectiveStats objective_stats() override;
    LatentAggregate update_latents(const Eigen::MatrixXd& p) override;

    const Eigen::MatrixXd& latents() const;
    void set_latents(const Eigen::MatrixXd& z);

private:
    ShardEngine engine_;
};

// ---------------------------------------------------------------------------
// Spec operations
// ---------------------------------------------------------------------------

ObjectiveTerms objective_terms(const ImageDataset& ds, const ModelState& model,
                               const LatentState& latents);
double objective(const ImageDataset& ds, const ModelState& model, const LatentState& latents);

RegularisedPrecision regularised_precision(const ModelState& model);

MeanAggregate mean_derivatives(const ImageDataset& ds, const ModelState& model,
                               const LatentState& latents);
BasisAggregate shape_derivatives(const ImageDataset& ds, const ModelState& model,
                                 const LatentState& latents);
BasisAggregate appearance_derivatives(const ImageDataset& ds, const ModelState& model,
                                      const LatentState& latents);

std::pair<ModelState, StepRecord> update_mean(const ImageDataset& ds, const ModelState& model,
                                              const LatentState& latents,
                                              const MeanAggregate& agg);
std::pair<ModelState, StepRecord> update_shape_basis(const ImageDataset& ds,
                                                     const ModelState& model,
                                                     const LatentState& latents,
                                                     const BasisAggregate& agg,
                                                     double step_scale = 1.0);
std::pair<ModelState, StepRecord> update_appearance_basis(const ImageDataset& ds,
                                                          const ModelState& model,
                                                          const LatentState& latents,
                                                          const BasisAggregate& agg,
                                                          double step_scale = 1.0);

/// One Gauss-Newton latent step per image against precision P.
LatentState update_latents(const ImageDataset& ds, const ModelState& model,
                           const LatentState& latents, const RegularisedPrecision& prec);

/// Wishart posterior expectation A = (N + nu0)(C_z + S + Lambda0^-1)^-1.
Eigen::MatrixXd update_A(const Eigen::MatrixXd& C_z, const Eigen::MatrixXd& S, double nu0,
                         const Eigen::MatrixXd& Lambda0, int n);

/// Transform making T Z (T Z)^T and (T^-1)' C T^-1 diagonal, with the
/// iterative diagonal rescaling Q = diag(exp q).
Eigen::MatrixXd orthogonalise(const Eigen::MatrixXd& C, const Eigen::MatrixXd& C_z,
                              const Eigen::MatrixXd& S, int n, double nu0,
                              const Eigen::MatrixXd& Lambda0);

/// Apply T consistently: W <- W T^-1 (per block in split mode), Z <- T Z,
/// S <- T S T', C_z <- T C_z T'.
void apply_transform(ModelState& model, LatentState& latents, const Eigen::MatrixXd& t);

std::tuple<ModelState, LatentState, TrainReport> train(const ImageDataset& ds,
                                                       const HyperParams& hyper,
                                                       std::uint64_t seed,
                                                       const TrainOptions& opt = {});

/// Training from caller-supplied initial latents (local only); exercises the
/// order-independence of the reductions.
std::tuple<ModelState, LatentState, TrainReport> train_with_init(const ImageDataset& ds,
                                                                 const HyperParams& hyper,
                                                                 const LatentState& init,
                                                                 const TrainOptions& opt = {});

/// The schedule itself, over any backend. Used by train() and by the
/// distributed master. If init is empty, latents are seeded via the Gram
/// aggregate; otherwise the backend must already hold matching latents.
std::pair<ModelState, TrainReport> run_training(Backend& backend, const HyperParams& hyper,
                                                std::uint64_t seed, const TrainOptions& opt,
                                                const LatentState* init = nullptr);

EngineConfig engine_config_from(const HyperParams& hyper);
EngineModel engine_model_from(const ModelState& model);

} // namespace sam
