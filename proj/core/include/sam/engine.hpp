#pragma once

#include <Eigen/Dense>
#include <memory>
#include <optional>
#include <vector>

#include "sam/accum.hpp"
#include "sam/dataset.hpp"
#include "sam/likelihood.hpp"
#include "sam/operators.hpp"

namespace sam {

/// Per-shard configuration broadcast alongside the model: everything a
/// worker needs to evaluate energies and derivatives locally.
struct EngineConfig {
    DataKind kind = DataKind::continuous;
    int t_steps = 8;
    std::array<double, 5> omega_v{1e-3, 0, 16, 1, 1};
    int K_a = 0;
    int K_v = 0;
    bool shared_latents = true;
    int max_halvings = 6;

    int total_latents() const { return shared_latents ? K_a : K_a + K_v; }
    int z_index_a(int k) const { return k; }
    int z_index_v(int k) const { return shared_latents ? k : K_a + k; }
};

/// Plain-double snapshot of the model parameters a worker holds.
struct EngineModel {
    std::vector<double> mu;     // C * M
    std::vector<double> W_a;    // K_a * C * M
    std::vector<double> W_v;    // K_v * D * M
    std::vector<double> sigma2; // C
};

/// Scalar aggregates returned with derivative replies. J / rss are exact
/// sums; counters are integers.
struct StatsAgg {
    ExactSum J;
    std::vector<ExactSum> rss;  // per channel (Gaussian kind)
    std::int64_t observed = 0;
    std::int64_t halvings = 0;  // latent phase
    std::int64_t rejected = 0;  // latent phase
};

struct MeanAgg {
    ExactArray g;      // C * M
    ExactArray H;      // C * M, or packed C x C blocks for categorical
    StatsAgg stats;
};

struct BasisAgg {
    std::vector<ExactArray> g;  // per column
    std::vector<ExactArray> H;
    StatsAgg stats;
};

struct LatentAgg {
    std::vector<ExactSum> S;    // K * K row-major
    std::vector<ExactSum> C_z;  // K * K row-major
    StatsAgg stats;
};

/// Single-image evaluation shared by the training engine and by
/// inference-time latent fits: reconstruction, shooting, energy and the
/// latent-space Gauss-Newton system.
class ImageEvaluator {
public:
    ImageEvaluator(const Grid& grid, int channels, const EngineConfig& cfg,
                   const EngineModel& model);

    const Grid& grid() const { return grid_; }
    int channels() const { return channels_; }
    const EngineConfig& config() const { return cfg_; }

    std::vector<double> appearance(const Eigen::VectorXd& z) const; // mu + W_a z
    Deformation deformation(const Eigen::VectorXd& z) const;        // shoot(W_v z)

    struct Evaluation {
        std::vector<double> a;
        Deformation psi;
        EnergyStats stats;
        LikelihoodDerivs ld; // filled only when derivatives were requested
    };
    Evaluation evaluate(const float* f, const std::uint8_t* mask, const Eigen::VectorXd& z,
                        bool want_derivs) const;

    EnergyStats stats(const float* f, const std::uint8_t* mask, const Eigen::VectorXd& z) const;

    /// Gradient and Hessian of the data term with respect to z, assembled
    /// from B = W_a - grad(a).W_v (the minus keeps Gauss-Newton steps
    /// descending under the psi ~ id - v shooting convention).
    struct LatentSystem {
        EnergyStats stats;
        Eigen::VectorXd g;
        Eigen::MatrixXd H;
    };
    LatentSystem latent_system(const float* f, const std::uint8_t* mask,
                               const Eigen::VectorXd& z) const;

    NoiseModel noise() const;

private:
    Grid grid_;
    int channels_;
    const EngineConfig& cfg_;
    const EngineModel& model_;
    OperatorKernel kernel_v_;
};

/// The worker-side computation core: owns one shard of images plus the
/// latent columns for those images, and serves the per-request computations
/// of the training loop. The same class backs single-process training (one
/// engine holding the whole dataset) and the network worker, which is what
/// makes distributed and local runs numerically identical.
///
/// All cross-image reductions use ExactSum, so results are independent of
/// the thread count.
class ShardEngine {
public:
    ShardEngine(ImageDataset shard, std::int64_t first_global_index);

    void configure(const EngineConfig& cfg);
    void set_model(const EngineModel& model);
    void set_threads(int threads) { threads_ = threads < 1 ? 1 : threads; }

    const ImageDataset& shard() const { return shard_; }
    int n_local() const { return shard_.n_images; }
    const Eigen::MatrixXd& latents() const { return Z_; }

    /// Global index of this shard's first image (drives init seeding).
    void set_first_index(std::int64_t i) { first_index_ = i; }

    /// Draw the raw init columns G for this shard (seeded by global image
    /// index), store them as the local latents, and return the local Gram
    /// matrix G G^T as exact sums.
    std::vector<ExactSum> init_latents_gram(std::uint64_t seed, int k);

    /// Z <- T Z (also used for the init whitening).
    void transform_latents(const Eigen::MatrixXd& t);

    MeanAgg mean_derivatives() const;
    BasisAgg shape_derivatives() const;
    BasisAgg appearance_derivatives() const;
    StatsAgg objective_stats() const;

    /// One Gauss-Newton latent step per image with per-image backtracking on
    /// J + 1/2 z^T P z; accumulates S = sum (H+P)^-1 and C_z = Z Z^T.
    LatentAgg update_latents(const Eigen::MatrixXd& p);

private:
    ImageEvaluator::Evaluation evaluate_image(int n, const Eigen::VectorXd& z,
                                              bool want_derivs) const;

    ImageDataset shard_;
    std::int64_t first_index_ = 0;
    EngineConfig cfg_;
    EngineModel model_;
    Eigen::MatrixXd Z_;
    std::unique_ptr<ImageEvaluator> eval_;
    int threads_ = 1;
    bool configured_ = false;
};

/// Static-partition parallel map over [0, n); fn(thread, i) must only touch
/// per-index or per-thread state.
void parallel_for(int n, int threads, const std::function<void(int, int)>& fn);

} // namespace sam
