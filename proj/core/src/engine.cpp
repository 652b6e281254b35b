#include "sam/engine.hpp"

#include <cmath>
#include <functional>
#include <mutex>
#include <thread>

#include "sam/error.hpp"
#include "sam/rng.hpp"
#include "sam/state.hpp"

namespace sam {

void parallel_for(int n, int threads, const std::function<void(int, int)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(0, i);
        return;
    }
    const int nt = std::min(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(nt);
    std::exception_ptr err;
    std::mutex err_mu;
    for (int t = 0; t < nt; ++t) {
        pool.emplace_back([&, t]() {
            try {
                for (int i = t; i < n; i += nt) fn(t, i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!err) err = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// ImageEvaluator
// ---------------------------------------------------------------------------

ImageEvaluator::ImageEvaluator(const Grid& grid, int channels, const EngineConfig& cfg,
                               const EngineModel& model)
    : grid_(grid),
      channels_(channels),
      cfg_(cfg),
      model_(model),
      kernel_v_(OperatorKernel::make_vector(grid, cfg.omega_v)) {}

NoiseModel ImageEvaluator::noise() const {
    NoiseModel nm;
    nm.kind = cfg_.kind;
    nm.sigma2 = model_.sigma2;
    return nm;
}

std::vector<double> ImageEvaluator::appearance(const Eigen::VectorXd& z) const {
    std::vector<double> a = model_.mu;
    const std::size_t cm = a.size();
    for (int k = 0; k < cfg_.K_a; ++k) {
        const double zk = z[cfg_.z_index_a(k)];
        const double* col = model_.W_a.data() + static_cast<std::size_t>(k) * cm;
        for (std::size_t i = 0; i < cm; ++i) a[i] += zk * col[i];
    }
    return a;
}

Deformation ImageEvaluator::deformation(const Eigen::VectorXd& z) const {
    const std::size_t dm = static_cast<std::size_t>(grid_.nd) * grid_.voxels();
    std::vector<double> vel(dm, 0.0);
    for (int k = 0; k < cfg_.K_v; ++k) {
        const double zk = z[cfg_.z_index_v(k)];
        const double* col = model_.W_v.data() + static_cast<std::size_t>(k) * dm;
        for (std::size_t i = 0; i < dm; ++i) vel[i] += zk * col[i];
    }
    return shoot(vel, kernel_v_, cfg_.t_steps);
}

ImageEvaluator::Evaluation ImageEvaluator::evaluate(const float* f, const std::uint8_t* mask,
                                                    const Eigen::VectorXd& z,
                                                    bool want_derivs) const {
    Evaluation out;
    out.a = appearance(z);
    out.psi = deformation(z);
    const NoiseModel nm = noise();
    const std::vector<double> aw = pull(grid_, out.a, channels_, out.psi.psi);
    out.stats = energy_stats(nm, grid_, channels_, f, aw, mask);
    if (want_derivs) out.ld = derivatives(nm, grid_, channels_, f, out.a, out.psi, mask);
    return out;
}

EnergyStats ImageEvaluator::stats(const float* f, const std::uint8_t* mask,
                                  const Eigen::VectorXd& z) const {
    const std::vector<double> a = appearance(z);
    const Deformation psi = deformation(z);
    const std::vector<double> aw = pull(grid_, a, channels_, psi.psi);
    return energy_stats(noise(), grid_, channels_, f, aw, mask);
}

ImageEvaluator::LatentSystem ImageEvaluator::latent_system(const float* f,
                                                           const std::uint8_t* mask,
                                                           const Eigen::VectorXd& z) const {
    const std::int64_t m = grid_.voxels();
    const int C = channels_;
    const int D = grid_.nd;
    const int K = cfg_.total_latents();
    const bool full = cfg_.kind == DataKind::categorical;

    Evaluation ev = evaluate(f, mask, z, true);
    const std::vector<double> grad = spatial_gradient(grid_, ev.a, C);

    // B: K columns mapping dz to template-appearance perturbations
    const std::size_t cm = static_cast<std::size_t>(C) * m;
    const std::size_t dm = static_cast<std::size_t>(D) * m;
    std::vector<double> B(static_cast<std::size_t>(K) * cm, 0.0);
    for (int k = 0; k < cfg_.K_a; ++k) {
        double* bk = B.data() + static_cast<std::size_t>(cfg_.z_index_a(k)) * cm;
        const double* col = model_.W_a.data() + static_cast<std::size_t>(k) * cm;
        for (std::size_t i = 0; i < cm; ++i) bk[i] += col[i];
    }
    for (int k = 0; k < cfg_.K_v; ++k) {
        double* bk = B.data() + static_cast<std::size_t>(cfg_.z_index_v(k)) * cm;
        const double* col = model_.W_v.data() + static_cast<std::size_t>(k) * dm;
        for (int c = 0; c < C; ++c)
            for (int d = 0; d < D; ++d) {
                const double* gr = grad.data() + (static_cast<std::size_t>(c) * D + d) * m;
                const double* wd = col + static_cast<std::size_t>(d) * m;
                double* bkc = bk + static_cast<std::size_t>(c) * m;
                for (std::int64_t v = 0; v < m; ++v) bkc[v] -= gr[v] * wd[v];
            }
    }

    LatentSystem sys;
    sys.stats = ev.stats;
    sys.g.resize(K);
    sys.H = Eigen::MatrixXd::Zero(K, K);
    for (int k = 0; k < K; ++k) {
        const double* bk = B.data() + static_cast<std::size_t>(k) * cm;
        double acc = 0.0;
        for (std::size_t i = 0; i < cm; ++i) acc += bk[i] * ev.ld.g[i];
        sys.g[k] = acc;
    }
    for (int k = 0; k < K; ++k)
        for (int l = k; l < K; ++l) {
            const double* bk = B.data() + static_cast<std::size_t>(k) * cm;
            const double* bl = B.data() + static_cast<std::size_t>(l) * cm;
            double acc = 0.0;
            if (!full) {
                for (int c = 0; c < C; ++c) {
                    const double* h = ev.ld.H.h.data() + static_cast<std::size_t>(c) * m;
                    const double* x = bk + static_cast<std::size_t>(c) * m;
                    const double* y = bl + static_cast<std::size_t>(c) * m;
                    for (std::int64_t v = 0; v < m; ++v) acc += x[v] * h[v] * y[v];
                }
            } else {
                for (int c = 0; c < C; ++c)
                    for (int c2 = 0; c2 < C; ++c2) {
                        const double* h =
                            ev.ld.H.h.data() + BlockField::packed_index(c, c2, C) * m;
                        const double* x = bk + static_cast<std::size_t>(c) * m;
                        const double* y = bl + static_cast<std::size_t>(c2) * m;
                        for (std::int64_t v = 0; v < m; ++v) acc += x[v] * h[v] * y[v];
                    }
            }
            sys.H(k, l) = acc;
            sys.H(l, k) = acc;
        }
    return sys;
}

// ---------------------------------------------------------------------------
// ShardEngine
// ---------------------------------------------------------------------------

ShardEngine::ShardEngine(ImageDataset shard, std::int64_t first_global_index)
    : shard_(std::move(shard)), first_index_(first_global_index) {
    validate_dataset(shard_);
}

void ShardEngine::configure(const EngineConfig& cfg) {
    if (cfg.kind != shard_.kind)
        throw Error("ShardEngine: configured kind does not match the shard");
    cfg_ = cfg;
    eval_ = std::make_unique<ImageEvaluator>(shard_.grid, shard_.channels, cfg_, model_);
    configured_ = true;
}

void ShardEngine::set_model(const EngineModel& model) {
    if (!configured_) throw Error("ShardEngine: configure() before set_model()");
    const std::size_t m = static_cast<std::size_t>(shard_.voxels());
    const std::size_t cm = static_cast<std::size_t>(shard_.channels) * m;
    const std::size_t dm = static_cast<std::size_t>(shard_.grid.nd) * m;
    if (model.mu.size() != cm || model.W_a.size() != cfg_.K_a * cm ||
        model.W_v.size() != cfg_.K_v * dm)
        throw Error("ShardEngine: model shapes do not match the shard grid");
    model_ = model;
}

std::vector<ExactSum> ShardEngine::init_latents_gram(std::uint64_t seed, int k) {
    Z_.resize(k, shard_.n_images);
    for (int n = 0; n < shard_.n_images; ++n)
        Z_.col(n) = init_gaussian_column(k, seed, first_index_ + n);
    std::vector<ExactSum> gram(static_cast<std::size_t>(k) * k);
    for (int n = 0; n < shard_.n_images; ++n)
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) gram[i * k + j].add(Z_(i, n) * Z_(j, n));
    return gram;
}

void ShardEngine::transform_latents(const Eigen::MatrixXd& t) {
    if (t.rows() != Z_.rows() || t.cols() != Z_.rows())
        throw Error("ShardEngine: transform shape mismatch");
    // per-column multiply: identical arithmetic regardless of shard width
    for (int n = 0; n < Z_.cols(); ++n) Z_.col(n) = t * Eigen::VectorXd(Z_.col(n));
}

ImageEvaluator::Evaluation ShardEngine::evaluate_image(int n, const Eigen::VectorXd& z,
                                                       bool want_derivs) const {
    return eval_->evaluate(shard_.image(n), shard_.image_mask(n), z, want_derivs);
}

namespace {

void merge_stats(StatsAgg& into, const StatsAgg& from) {
    into.J.merge(from.J);
    if (into.rss.size() != from.rss.size()) throw Error("merge_stats: channel mismatch");
    for (std::size_t c = 0; c < into.rss.size(); ++c) into.rss[c].merge(from.rss[c]);
    into.observed += from.observed;
    into.halvings += from.halvings;
    into.rejected += from.rejected;
}

void add_stats(StatsAgg& into, const EnergyStats& s) {
    into.J.add(s.J);
    for (std::size_t c = 0; c < s.rss.size(); ++c) into.rss[c].add(s.rss[c]);
    into.observed += s.observed;
}

} // namespace

StatsAgg ShardEngine::objective_stats() const {
    std::vector<StatsAgg> per(threads_);
    for (auto& s : per) s.rss.resize(shard_.channels);
    parallel_for(shard_.n_images, threads_, [&](int t, int n) {
        add_stats(per[t], eval_->stats(shard_.image(n), shard_.image_mask(n), Z_.col(n)));
    });
    StatsAgg out = std::move(per[0]);
    for (int t = 1; t < threads_; ++t) merge_stats(out, per[t]);
    return out;
}

MeanAgg ShardEngine::mean_derivatives() const {
    const std::int64_t m = shard_.voxels();
    const int C = shard_.channels;
    const bool full = cfg_.kind == DataKind::categorical;
    const std::size_t hsize = (full ? BlockField::packed_size(C) : static_cast<std::size_t>(C)) *
                              static_cast<std::size_t>(m);
    std::vector<MeanAgg> per(threads_);
    for (auto& a : per) {
        a.g = ExactArray(static_cast<std::size_t>(C) * m);
        a.H = ExactArray(hsize);
        a.stats.rss.resize(C);
    }
    parallel_for(shard_.n_images, threads_, [&](int t, int n) {
        auto pi = evaluate_image(n, Z_.col(n), true);
        for (std::size_t i = 0; i < pi.ld.g.size(); ++i) per[t].g.add(i, pi.ld.g[i]);
        for (std::size_t i = 0; i < pi.ld.H.h.size(); ++i) per[t].H.add(i, pi.ld.H.h[i]);
        add_stats(per[t].stats, pi.stats);
    });
    MeanAgg out = std::move(per[0]);
    for (int t = 1; t < threads_; ++t) {
        out.g.merge(per[t].g);
        out.H.merge(per[t].H);
        merge_stats(out.stats, per[t].stats);
    }
    return out;
}

BasisAgg ShardEngine::appearance_derivatives() const {
    const std::int64_t m = shard_.voxels();
    const int C = shard_.channels;
    const bool full = cfg_.kind == DataKind::categorical;
    const std::size_t gsize = static_cast<std::size_t>(C) * m;
    const std::size_t hsize = (full ? BlockField::packed_size(C) : static_cast<std::size_t>(C)) *
                              static_cast<std::size_t>(m);
    std::vector<BasisAgg> per(threads_);
    for (auto& a : per) {
        a.g.resize(cfg_.K_a);
        a.H.resize(cfg_.K_a);
        for (int k = 0; k < cfg_.K_a; ++k) {
            a.g[k] = ExactArray(gsize);
            a.H[k] = ExactArray(hsize);
        }
        a.stats.rss.resize(C);
    }
    parallel_for(shard_.n_images, threads_, [&](int t, int n) {
        auto pi = evaluate_image(n, Z_.col(n), true);
        for (int k = 0; k < cfg_.K_a; ++k) {
            const double zk = Z_(cfg_.z_index_a(k), n);
            if (zk == 0.0) continue;
            const double zk2 = zk * zk;
            for (std::size_t i = 0; i < gsize; ++i) per[t].g[k].add(i, zk * pi.ld.g[i]);
            for (std::size_t i = 0; i < hsize; ++i) per[t].H[k].add(i, zk2 * pi.ld.H.h[i]);
        }
        add_stats(per[t].stats, pi.stats);
    });
    BasisAgg out = std::move(per[0]);
    for (int t = 1; t < threads_; ++t) {
        for (int k = 0; k < cfg_.K_a; ++k) {
            out.g[k].merge(per[t].g[k]);
            out.H[k].merge(per[t].H[k]);
        }
        merge_stats(out.stats, per[t].stats);
    }
    return out;
}

BasisAgg ShardEngine::shape_derivatives() const {
    const Grid& g = shard_.grid;
    const std::int64_t m = g.voxels();
    const int C = shard_.channels;
    const int D = g.nd;
    const bool full = cfg_.kind == DataKind::categorical;
    const std::size_t gsize = static_cast<std::size_t>(D) * m;
    const std::size_t hsize = BlockField::packed_size(D) * static_cast<std::size_t>(m);
    std::vector<BasisAgg> per(threads_);
    for (auto& a : per) {
        a.g.resize(cfg_.K_v);
        a.H.resize(cfg_.K_v);
        for (int k = 0; k < cfg_.K_v; ++k) {
            a.g[k] = ExactArray(gsize);
            a.H[k] = ExactArray(hsize);
        }
        a.stats.rss.resize(C);
    }
    parallel_for(shard_.n_images, threads_, [&](int t, int n) {
        auto pi = evaluate_image(n, Z_.col(n), true);
        // velocity-space gradient along -grad(a); the sign keeps these
        // updates descending under the psi ~ id - v convention
        const std::vector<double> grad = spatial_gradient(g, pi.a, C);
        std::vector<double> gv(gsize), hv(hsize, 0.0);
        for (std::int64_t v = 0; v < m; ++v) {
            for (int d = 0; d < D; ++d) {
                double acc = 0.0;
                for (int c = 0; c < C; ++c)
                    acc += grad[(static_cast<std::size_t>(c) * D + d) * m + v] *
                           pi.ld.g[static_cast<std::size_t>(c) * m + v];
                gv[static_cast<std::size_t>(d) * m + v] = -acc;
            }
            for (int d = 0; d < D; ++d)
                for (int e = d; e < D; ++e) {
                    double acc = 0.0;
                    if (!full) {
                        for (int c = 0; c < C; ++c)
                            acc += grad[(static_cast<std::size_t>(c) * D + d) * m + v] *
                                   pi.ld.H.h[static_cast<std::size_t>(c) * m + v] *
                                   grad[(static_cast<std::size_t>(c) * D + e) * m + v];
                    } else {
                        for (int c = 0; c < C; ++c)
                            for (int c2 = 0; c2 < C; ++c2)
                                acc += grad[(static_cast<std::size_t>(c) * D + d) * m + v] *
                                       pi.ld.H.h[BlockField::packed_index(c, c2, C) * m + v] *
                                       grad[(static_cast<std::size_t>(c2) * D + e) * m + v];
                    }
                    hv[BlockField::packed_index(d, e, D) * m + v] = acc;
                }
        }
        for (int k = 0; k < cfg_.K_v; ++k) {
            const double zk = Z_(cfg_.z_index_v(k), n);
            if (zk == 0.0) continue;
            const double zk2 = zk * zk;
            for (std::size_t i = 0; i < gsize; ++i) per[t].g[k].add(i, zk * gv[i]);
            for (std::size_t i = 0; i < hsize; ++i) per[t].H[k].add(i, zk2 * hv[i]);
        }
        add_stats(per[t].stats, pi.stats);
    });
    BasisAgg out = std::move(per[0]);
    for (int t = 1; t < threads_; ++t) {
        for (int k = 0; k < cfg_.K_v; ++k) {
            out.g[k].merge(per[t].g[k]);
            out.H[k].merge(per[t].H[k]);
        }
        merge_stats(out.stats, per[t].stats);
    }
    return out;
}

LatentAgg ShardEngine::update_latents(const Eigen::MatrixXd& p) {
    const int C = shard_.channels;
    const int K = cfg_.total_latents();
    if (p.rows() != K || p.cols() != K) throw Error("update_latents: precision shape mismatch");

    std::vector<LatentAgg> per(threads_);
    for (auto& a : per) {
        a.S.resize(static_cast<std::size_t>(K) * K);
        a.C_z.resize(static_cast<std::size_t>(K) * K);
        a.stats.rss.resize(C);
    }

    parallel_for(shard_.n_images, threads_, [&](int t, int n) {
        const float* f = shard_.image(n);
        const std::uint8_t* mask = shard_.image_mask(n);
        Eigen::VectorXd z = Z_.col(n);
        ImageEvaluator::LatentSystem sys = eval_->latent_system(f, mask, z);

        const Eigen::MatrixXd hp = sys.H + p;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(hp);
        if (ldlt.info() != Eigen::Success)
            throw Error("update_latents: singular (H + P) for image " + std::to_string(n));
        const Eigen::VectorXd step = ldlt.solve(sys.g + p * z);
        const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(K, K));

        // backtracking on this image's own objective term
        const double j0 = sys.stats.J + 0.5 * z.dot(p * z);
        bool accepted = false;
        EnergyStats accepted_stats = sys.stats;
        Eigen::VectorXd znew = z;
        double alpha = 1.0;
        for (int h = 0; h <= cfg_.max_halvings; ++h, alpha *= 0.5) {
            const Eigen::VectorXd zc = z - alpha * step;
            EnergyStats trial = eval_->stats(f, mask, zc);
            const double jc = trial.J + 0.5 * zc.dot(p * zc);
            if (jc <= j0) {
                znew = zc;
                accepted = true;
                accepted_stats = trial;
                per[t].stats.halvings += h;
                break;
            }
        }
        if (!accepted) per[t].stats.rejected += 1;

        Z_.col(n) = znew;
        for (int i = 0; i < K; ++i)
            for (int j = 0; j < K; ++j) {
                per[t].S[i * K + j].add(cov(i, j));
                per[t].C_z[i * K + j].add(znew[i] * znew[j]);
            }
        add_stats(per[t].stats, accepted_stats);
    });

    LatentAgg out = std::move(per[0]);
    for (int t = 1; t < threads_; ++t) {
        for (std::size_t i = 0; i < out.S.size(); ++i) {
            out.S[i].merge(per[t].S[i]);
            out.C_z[i].merge(per[t].C_z[i]);
        }
        merge_stats(out.stats, per[t].stats);
    }
    return out;
}

} // namespace sam
