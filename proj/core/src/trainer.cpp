#include "sam/trainer.hpp"

#include <cmath>

#include "sam/error.hpp"

namespace sam {

namespace {

ObjectiveStats extract(const StatsAgg& s) {
    ObjectiveStats o;
    o.J = s.J.value();
    o.rss.resize(s.rss.size());
    for (std::size_t c = 0; c < s.rss.size(); ++c) o.rss[c] = s.rss[c].value();
    o.observed = static_cast<double>(s.observed);
    o.halvings = s.halvings;
    o.rejected = s.rejected;
    return o;
}

Eigen::MatrixXd matrix_from(const std::vector<ExactSum>& v, int k) {
    Eigen::MatrixXd m(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) m(i, j) = v[static_cast<std::size_t>(i) * k + j].value();
    return m;
}

double vdot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double logdet_spd(const Eigen::MatrixXd& a, const char* who) {
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success)
        throw Error(std::string(who) + ": matrix is not positive definite");
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

} // namespace

EngineConfig engine_config_from(const HyperParams& hyper) {
    EngineConfig cfg;
    cfg.kind = hyper.kind;
    cfg.t_steps = hyper.t_steps;
    cfg.omega_v = hyper.omega_v;
    cfg.K_a = hyper.K_a;
    cfg.K_v = hyper.K_v;
    cfg.shared_latents = hyper.shared_latents;
    return cfg;
}

EngineModel engine_model_from(const ModelState& model) {
    return EngineModel{model.mu, model.W_a, model.W_v, model.sigma2};
}

// ---------------------------------------------------------------------------
// LocalBackend
// ---------------------------------------------------------------------------

LocalBackend::LocalBackend(const ImageDataset& ds, int threads) : engine_(ds, 0) {
    engine_.set_threads(threads);
}

Grid LocalBackend::grid() const { return engine_.shard().grid; }
int LocalBackend::channels() const { return engine_.shard().channels; }
DataKind LocalBackend::kind() const { return engine_.shard().kind; }
int LocalBackend::n_total() const { return engine_.n_local(); }
void LocalBackend::configure(const EngineConfig& cfg) { engine_.configure(cfg); }
void LocalBackend::broadcast_model(const EngineModel& model) { engine_.set_model(model); }

Eigen::MatrixXd LocalBackend::init_gram(std::uint64_t seed, int k) {
    return matrix_from(engine_.init_latents_gram(seed, k), k);
}

void LocalBackend::transform_latents(const Eigen::MatrixXd& t) { engine_.transform_latents(t); }

MeanAggregate LocalBackend::mean_derivatives() {
    MeanAgg a = engine_.mean_derivatives();
    MeanAggregate out;
    out.g = a.g.values();
    out.H.ncomp = channels();
    out.H.full = kind() == DataKind::categorical;
    out.H.h = a.H.values();
    out.stats = extract(a.stats);
    return out;
}

namespace {
BasisAggregate extract_basis(BasisAgg&& a, int block_comp, bool full) {
    BasisAggregate out;
    out.g.resize(a.g.size());
    out.H.resize(a.H.size());
    for (std::size_t k = 0; k < a.g.size(); ++k) {
        out.g[k] = a.g[k].values();
        out.H[k].ncomp = block_comp;
        out.H[k].full = full;
        out.H[k].h = a.H[k].values();
    }
    out.stats = extract(a.stats);
    return out;
}
} // namespace

BasisAggregate LocalBackend::shape_derivatives() {
    return extract_basis(engine_.shape_derivatives(), grid().nd, true);
}

BasisAggregate LocalBackend::appearance_derivatives() {
    return extract_basis(engine_.appearance_derivatives(), channels(),
                         kind() == DataKind::categorical);
}

ObjectiveStats LocalBackend::objective_stats() { return extract(engine_.objective_stats()); }

LatentAggregate LocalBackend::update_latents(const Eigen::MatrixXd& p) {
    LatentAgg a = engine_.update_latents(p);
    const int k = static_cast<int>(p.rows());
    LatentAggregate out;
    out.S = matrix_from(a.S, k);
    out.C_z = matrix_from(a.C_z, k);
    out.stats = extract(a.stats);
    return out;
}

const Eigen::MatrixXd& LocalBackend::latents() const { return engine_.latents(); }

void LocalBackend::set_latents(const Eigen::MatrixXd& z) {
    if (z.cols() != engine_.n_local())
        throw Error("set_latents: column count must match the dataset");
    // route through the engine API: seed columns are irrelevant, the
    // transform below overwrites them
    engine_.init_latents_gram(0, static_cast<int>(z.rows()));
    Eigen::MatrixXd& zl = const_cast<Eigen::MatrixXd&>(engine_.latents());
    zl = z;
}

// ---------------------------------------------------------------------------
// Master-side context: kernels, priors and the latent summary the loop keeps.
// ---------------------------------------------------------------------------

namespace {

struct Ctx {
    HyperParams hyper;
    Grid grid;
    int channels;
    int N;
    int K;
    OperatorKernel La, Lv, Lmu;
    double nu0;
    Eigen::MatrixXd Lambda0, Lambda0inv;
    Eigen::MatrixXd A_hat, C_z, S;

    Ctx(const HyperParams& h, const Grid& g, int c, int n)
        : hyper(h),
          grid(g),
          channels(c),
          N(n),
          K(h.total_latents()),
          La(OperatorKernel::make_scalar(g, h.omega_a)),
          Lv(OperatorKernel::make_vector(g, h.omega_v)),
          Lmu(OperatorKernel::make_scalar(g, h.omega_mu)),
          nu0(h.effective_nu0()),
          Lambda0(h.effective_lambda0()) {
        Eigen::LLT<Eigen::MatrixXd> llt(Lambda0);
        if (llt.info() != Eigen::Success) throw Error("Lambda0 must be positive definite");
        Lambda0inv = llt.solve(Eigen::MatrixXd::Identity(K, K));
        A_hat = nu0 * Lambda0;
        C_z = Eigen::MatrixXd::Identity(K, K);
        S = Eigen::MatrixXd::Zero(K, K);
    }
};

Eigen::MatrixXd compute_C(const Ctx& ctx, const ModelState& model) {
    const int K = ctx.K;
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(K, K);
    const std::size_t was = model.wa_stride();
    std::vector<std::vector<double>> lwa(model.hyper.K_a);
    for (int k = 0; k < model.hyper.K_a; ++k) {
        std::vector<double> col(model.wa_col(k), model.wa_col(k) + was);
        lwa[k] = ctx.La.apply(col, model.channels);
    }
    for (int i = 0; i < model.hyper.K_a; ++i)
        for (int j = i; j < model.hyper.K_a; ++j) {
            double s = 0.0;
            const double* wi = model.wa_col(i);
            for (std::size_t v = 0; v < was; ++v) s += wi[v] * lwa[j][v];
            c(model.z_index_a(i), model.z_index_a(j)) += s;
            if (i != j) c(model.z_index_a(j), model.z_index_a(i)) += s;
        }
    const std::size_t wvs = model.wv_stride();
    std::vector<std::vector<double>> lwv(model.hyper.K_v);
    for (int k = 0; k < model.hyper.K_v; ++k) {
        std::vector<double> col(model.wv_col(k), model.wv_col(k) + wvs);
        lwv[k] = ctx.Lv.apply(col, model.grid.nd);
    }
    for (int i = 0; i < model.hyper.K_v; ++i)
        for (int j = i; j < model.hyper.K_v; ++j) {
            double s = 0.0;
            const double* wi = model.wv_col(i);
            for (std::size_t v = 0; v < wvs; ++v) s += wi[v] * lwv[j][v];
            c(model.z_index_v(i), model.z_index_v(j)) += s;
            if (i != j) c(model.z_index_v(j), model.z_index_v(i)) += s;
        }
    return c;
}

ObjectiveTerms assemble_objective(const Ctx& ctx, const ModelState& model, double data_j) {
    ObjectiveTerms t;
    t.data = data_j;
    const std::vector<double> lmu_mu = ctx.Lmu.apply(model.mu, model.channels);
    t.mu_prior = 0.5 * vdot(model.mu, lmu_mu);
    const Eigen::MatrixXd c = compute_C(ctx, model);
    t.basis_trace = 0.5 * ctx.hyper.lambda1 * ctx.N * c.trace();
    t.strategy2 = 0.5 * ctx.hyper.lambda2 * ctx.C_z.cwiseProduct(c).sum();
    const double logdet_a = logdet_spd(ctx.A_hat, "objective");
    const double tr = (ctx.C_z + ctx.Lambda0inv).cwiseProduct(ctx.A_hat).sum();
    t.wishart =
        0.5 * ctx.hyper.lambda1 * (tr - (ctx.N + ctx.nu0 - ctx.K - 1) * logdet_a);
    return t;
}

constexpr int kMaxHalvings = 6;

struct PhaseOut {
    StepRecord rec;
    ObjectiveStats final_stats; // stats at the state left on the workers
};

PhaseOut backtrack_phase(Backend& b, const Ctx& ctx, ModelState& model, int iter,
                         const std::string& phase, double obj_before,
                         const ObjectiveStats& baseline_stats,
                         const std::function<void(ModelState&, double)>& apply_step) {
    PhaseOut out;
    out.rec = StepRecord{iter, phase, obj_before, obj_before, 0, false};
    double alpha = 1.0;
    for (int h = 0; h <= kMaxHalvings; ++h, alpha *= 0.5) {
        ModelState cand = model;
        apply_step(cand, alpha);
        b.broadcast_model(engine_model_from(cand));
        ObjectiveStats st = b.objective_stats();
        const double obj = assemble_objective(ctx, cand, st.J).total();
        if (obj <= obj_before) {
            model = std::move(cand);
            out.rec.obj_after = obj;
            out.rec.halvings = h;
            out.rec.accepted = true;
            out.final_stats = st;
            return out;
        }
    }
    b.broadcast_model(engine_model_from(model)); // restore the rejected state
    out.final_stats = baseline_stats;
    return out;
}

StepRecord mean_phase(Backend& b, const Ctx& ctx, ModelState& model, const MeanAggregate& agg,
                      int iter, ObjectiveStats* stats_out) {
    const double obj0 = assemble_objective(ctx, model, agg.stats.J).total();
    std::vector<double> rhs = ctx.Lmu.apply(model.mu, model.channels);
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] += agg.g[i];
    const std::vector<double> delta = solve_regularised(agg.H, ctx.Lmu, 1.0, rhs);
    PhaseOut po = backtrack_phase(b, ctx, model, iter, "mean", obj0, agg.stats,
                                  [&](ModelState& m, double a) {
                                      for (std::size_t i = 0; i < m.mu.size(); ++i)
                                          m.mu[i] -= a * delta[i];
                                  });
    if (stats_out) *stats_out = po.final_stats;
    return po.rec;
}

StepRecord basis_phase(Backend& b, const Ctx& ctx, ModelState& model, const BasisAggregate& agg,
                       bool shape, int iter, double step_scale) {
    const double obj0 = assemble_objective(ctx, model, agg.stats.J).total();
    const int cols = shape ? model.hyper.K_v : model.hyper.K_a;
    const OperatorKernel& L = shape ? ctx.Lv : ctx.La;
    const int ncomp = shape ? model.grid.nd : model.channels;
    std::vector<std::vector<double>> delta(cols);
    for (int k = 0; k < cols; ++k) {
        const int zi = shape ? model.z_index_v(k) : model.z_index_a(k);
        const double w = ctx.hyper.lambda1 * ctx.N + ctx.hyper.lambda2 * ctx.C_z(zi, zi);
        const double* colp = shape ? model.wv_col(k) : model.wa_col(k);
        const std::size_t stride = shape ? model.wv_stride() : model.wa_stride();
        std::vector<double> col(colp, colp + stride);
        std::vector<double> rhs = L.apply(col, ncomp);
        for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = agg.g[k][i] + w * rhs[i];
        delta[k] = solve_regularised(agg.H[k], L, w, rhs);
        if (step_scale != 1.0)
            for (double& d : delta[k]) d *= step_scale;
    }
    PhaseOut po = backtrack_phase(
        b, ctx, model, iter, shape ? "shape_basis" : "appearance_basis", obj0, agg.stats,
        [&](ModelState& m, double a) {
            for (int k = 0; k < cols; ++k) {
                double* colp = shape ? m.wv_col(k) : m.wa_col(k);
                for (std::size_t i = 0; i < delta[k].size(); ++i) colp[i] -= a * delta[k][i];
            }
        });
    return po.rec;
}

double offdiag_ratio(const Eigen::MatrixXd& m) {
    double off = 0.0, diag = 0.0;
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j)
            (i == j ? diag : off) += m(i, j) * m(i, j);
    return diag > 0.0 ? std::sqrt(off / diag) : 0.0;
}

} // namespace

// ---------------------------------------------------------------------------
// Wishart update and orthogonalisation
// ---------------------------------------------------------------------------

Eigen::MatrixXd update_A(const Eigen::MatrixXd& C_z, const Eigen::MatrixXd& S, double nu0,
                         const Eigen::MatrixXd& Lambda0, int n) {
    const int k = static_cast<int>(C_z.rows());
    Eigen::LLT<Eigen::MatrixXd> l0(Lambda0);
    if (l0.info() != Eigen::Success) throw Error("update_A: Lambda0 must be positive definite");
    Eigen::MatrixXd arg = C_z + S + l0.solve(Eigen::MatrixXd::Identity(k, k));
    arg = 0.5 * (arg + arg.transpose()).eval();
    Eigen::LLT<Eigen::MatrixXd> llt(arg);
    if (llt.info() != Eigen::Success)
        throw Error("update_A: C_z + S + Lambda0^-1 is not positive definite");
    Eigen::MatrixXd a = (n + nu0) * llt.solve(Eigen::MatrixXd::Identity(k, k));
    return 0.5 * (a + a.transpose()).eval();
}

Eigen::MatrixXd orthogonalise(const Eigen::MatrixXd& C, const Eigen::MatrixXd& C_z,
                              const Eigen::MatrixXd& S, int n, double nu0,
                              const Eigen::MatrixXd& Lambda0) {
    const int k = static_cast<int>(C.rows());
    if (k == 0) return Eigen::MatrixXd(0, 0);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig_z(C_z);
    if (eig_z.info() != Eigen::Success) throw Error("orthogonalise: eig(C_z) failed");
    const double dz_max = eig_z.eigenvalues().maxCoeff();
    if (dz_max <= 0.0) throw Error("orthogonalise: C_z is rank deficient beyond repair");
    // early iterations can leave Z nearly rank deficient; floor before the
    // inverse square root
    Eigen::VectorXd dz = eig_z.eigenvalues().cwiseMax(1e-12 * dz_max);
    const Eigen::MatrixXd vz = eig_z.eigenvectors();

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig_w(C);
    if (eig_w.info() != Eigen::Success) throw Error("orthogonalise: eig(C) failed");
    Eigen::VectorXd dw = eig_w.eigenvalues().cwiseMax(0.0);
    const Eigen::MatrixXd vw = eig_w.eigenvectors();

    const Eigen::MatrixXd whiten = dz.cwiseInverse().cwiseSqrt().asDiagonal() * vz.transpose();
    if (dw.maxCoeff() <= 0.0) {
        // C == 0 (untrained bases): whitening alone diagonalises both
        return whiten;
    }

    const Eigen::MatrixXd mid = dw.cwiseSqrt().asDiagonal() * vw.transpose() * vz *
                                dz.cwiseSqrt().asDiagonal();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(mid, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::VectorXd d = svd.singularValues().cwiseMax(1e-12 * svd.singularValues().maxCoeff());
    Eigen::MatrixXd t = d.asDiagonal() * svd.matrixV().transpose() * whiten;

    // iterative diagonal rescale Q = diag(exp q)
    const Eigen::MatrixXd t_inv = t.inverse();
    const Eigen::MatrixXd cz_t = t * C_z * t.transpose();          // becomes diagonal-dominant
    const Eigen::MatrixXd czs_t = t * (C_z + S) * t.transpose();
    const Eigen::MatrixXd c_t = t_inv.transpose() * C * t_inv;
    Eigen::LLT<Eigen::MatrixXd> l0(Lambda0);
    if (l0.info() != Eigen::Success)
        throw Error("orthogonalise: Lambda0 must be positive definite");
    const Eigen::MatrixXd l0inv = l0.solve(Eigen::MatrixXd::Identity(k, k));
    const Eigen::VectorXd c_diag = c_t.diagonal();

    Eigen::VectorXd q = Eigen::VectorXd::Zero(k);
    for (int it = 0; it < 100; ++it) {
        const Eigen::VectorXd b = q.array().exp().matrix();      // diag(Q)
        const Eigen::VectorXd b2i = (-2.0 * q.array()).exp().matrix(); // diag(Q^-2)
        Eigen::MatrixXd qcq = b.asDiagonal() * czs_t * b.asDiagonal() + l0inv;
        qcq = 0.5 * (qcq + qcq.transpose()).eval();
        Eigen::LLT<Eigen::MatrixXd> llt(qcq);
        if (llt.info() != Eigen::Success) break;
        const Eigen::MatrixXd a = (n + nu0) * llt.solve(Eigen::MatrixXd::Identity(k, k));
        const Eigen::MatrixXd r = 2.0 * a.cwiseProduct(cz_t.transpose());
        const Eigen::VectorXd rb = r * b;
        const Eigen::VectorXd grad =
            b.cwiseProduct(rb) - 2.0 * b2i.cwiseProduct(c_diag);
        // exact Hessian of the scaling objective; its last term only
        // involves the diagonal of (T^-1)' C T^-1
        Eigen::MatrixXd hess = b.asDiagonal() * r * b.asDiagonal();
        hess += Eigen::MatrixXd(b.cwiseProduct(rb).asDiagonal());
        hess += Eigen::MatrixXd((4.0 * b2i.cwiseProduct(c_diag)).asDiagonal());
        Eigen::LDLT<Eigen::MatrixXd> hld(hess);
        if (hld.info() != Eigen::Success) break;
        Eigen::VectorXd dq = hld.solve(grad);
        for (int i = 0; i < k; ++i) dq[i] = std::clamp(dq[i], -4.0, 4.0);
        q -= dq;
        if (dq.lpNorm<Eigen::Infinity>() < 1e-8) break;
    }
    return q.array().exp().matrix().asDiagonal() * t;
}

namespace {

// split mode keeps appearance and shape latents separate: orthogonalise each
// block and assemble a block-diagonal transform
Eigen::MatrixXd orthogonalise_for(const Ctx& ctx, const Eigen::MatrixXd& C) {
    if (ctx.hyper.shared_latents)
        return orthogonalise(C, ctx.C_z, ctx.S, ctx.N, ctx.nu0, ctx.Lambda0);
    const int ka = ctx.hyper.K_a, kv = ctx.hyper.K_v;
    Eigen::MatrixXd t = Eigen::MatrixXd::Identity(ctx.K, ctx.K);
    if (ka > 0)
        t.topLeftCorner(ka, ka) =
            orthogonalise(C.topLeftCorner(ka, ka), ctx.C_z.topLeftCorner(ka, ka),
                          ctx.S.topLeftCorner(ka, ka), ctx.N, ctx.nu0,
                          ctx.Lambda0.topLeftCorner(ka, ka));
    if (kv > 0)
        t.bottomRightCorner(kv, kv) =
            orthogonalise(C.bottomRightCorner(kv, kv), ctx.C_z.bottomRightCorner(kv, kv),
                          ctx.S.bottomRightCorner(kv, kv), ctx.N, ctx.nu0,
                          ctx.Lambda0.bottomRightCorner(kv, kv));
    return t;
}

void transform_model_columns(ModelState& model, const Eigen::MatrixXd& t_inv) {
    const std::size_t was = model.wa_stride();
    if (model.hyper.K_a > 0) {
        std::vector<double> wa(model.W_a.size(), 0.0);
        for (int k = 0; k < model.hyper.K_a; ++k) {
            double* dst = wa.data() + static_cast<std::size_t>(k) * was;
            for (int j = 0; j < model.hyper.K_a; ++j) {
                const double w = t_inv(model.z_index_a(j), model.z_index_a(k));
                if (w == 0.0) continue;
                const double* src = model.wa_col(j);
                for (std::size_t i = 0; i < was; ++i) dst[i] += src[i] * w;
            }
        }
        model.W_a = std::move(wa);
    }
    const std::size_t wvs = model.wv_stride();
    if (model.hyper.K_v > 0) {
        std::vector<double> wv(model.W_v.size(), 0.0);
        for (int k = 0; k < model.hyper.K_v; ++k) {
            double* dst = wv.data() + static_cast<std::size_t>(k) * wvs;
            for (int j = 0; j < model.hyper.K_v; ++j) {
                const double w = t_inv(model.z_index_v(j), model.z_index_v(k));
                if (w == 0.0) continue;
                const double* src = model.wv_col(j);
                for (std::size_t i = 0; i < wvs; ++i) dst[i] += src[i] * w;
            }
        }
        model.W_v = std::move(wv);
    }
}

} // namespace

void apply_transform(ModelState& model, LatentState& latents, const Eigen::MatrixXd& t) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(t);
    if (!lu.isInvertible()) throw Error("apply_transform: T is singular");
    const Eigen::MatrixXd t_inv = lu.inverse();
    transform_model_columns(model, t_inv);
    for (int n = 0; n < latents.Z.cols(); ++n)
        latents.Z.col(n) = t * Eigen::VectorXd(latents.Z.col(n));
    latents.S = (t * latents.S * t.transpose()).eval();
    latents.C_z = (t * latents.C_z * t.transpose()).eval();
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

std::pair<ModelState, TrainReport> run_training(Backend& backend, const HyperParams& hyper,
                                                std::uint64_t seed, const TrainOptions& opt,
                                                const LatentState* init) {
    validate_hyper(hyper);
    if (hyper.kind != backend.kind())
        throw Error("train: hyper kind does not match the dataset kind");
    const Grid grid = backend.grid();
    const int channels = backend.channels();
    const int n = backend.n_total();
    const int k = hyper.total_latents();

    Ctx ctx(hyper, grid, channels, n);
    ModelState model = make_initial_model(grid, channels, hyper);

    backend.configure(engine_config_from(hyper));
    if (init) {
        // backend already holds matching latents (local path)
        ctx.C_z = init->C_z;
        ctx.S = init->S;
    } else {
        const Eigen::MatrixXd gram = backend.init_gram(seed, k);
        const Eigen::MatrixXd w = gram_whitener(gram, n);
        backend.transform_latents(w);
        Eigen::MatrixXd cz = w * gram * w.transpose();
        ctx.C_z = 0.5 * (cz + cz.transpose());
        ctx.S = Eigen::MatrixXd::Zero(k, k);
    }
    backend.broadcast_model(engine_model_from(model));

    TrainReport report;
    for (int iter = 0; iter < hyper.em_iters; ++iter) {
        IterationLog il;
        il.iter = iter;

        // mean
        MeanAggregate ma = backend.mean_derivatives();
        ObjectiveStats accepted;
        report.steps.push_back(mean_phase(backend, ctx, model, ma, iter, &accepted));

        // sigma^2 refresh on the accepted state
        if (hyper.kind == DataKind::continuous) {
            for (int c = 0; c < channels; ++c)
                model.sigma2[c] = std::max(accepted.rss[c] / accepted.observed, kSigma2Floor);
            backend.broadcast_model(engine_model_from(model));
        }

        // shape basis
        if (hyper.K_v > 0) {
            BasisAggregate sa = backend.shape_derivatives();
            report.steps.push_back(basis_phase(backend, ctx, model, sa, true, iter, 1.0));
        }

        // appearance basis
        if (hyper.K_a > 0) {
            BasisAggregate aa = backend.appearance_derivatives();
            report.steps.push_back(basis_phase(backend, ctx, model, aa, false, iter, 1.0));
        }

        // latent update with P = lambda1 A + lambda2 C
        const Eigen::MatrixXd c_mat = compute_C(ctx, model);
        Eigen::MatrixXd p = hyper.lambda1 * ctx.A_hat + hyper.lambda2 * c_mat;
        p = 0.5 * (p + p.transpose()).eval();
        {
            Eigen::LLT<Eigen::MatrixXd> pl(p);
            if (pl.info() != Eigen::Success)
                throw Error("train: latent precision is not positive definite");
        }
        const double obj_before_latents = assemble_objective(ctx, model, accepted.J).total();
        LatentAggregate la = backend.update_latents(p);
        ctx.C_z = la.C_z;
        ctx.S = la.S;
        il.terms = assemble_objective(ctx, model, la.stats.J);
        il.objective = il.terms.total();
        report.steps.push_back(StepRecord{iter, "latents", obj_before_latents, il.objective,
                                          static_cast<int>(la.stats.halvings), true});
        il.latent_halvings = la.stats.halvings;
        il.latent_rejected = la.stats.rejected;

        // orthogonalise and re-express everything through T
        const Eigen::MatrixXd t = orthogonalise_for(ctx, c_mat);
        Eigen::FullPivLU<Eigen::MatrixXd> lu(t);
        if (!lu.isInvertible()) throw Error("train: orthogonalisation transform is singular");
        const Eigen::MatrixXd t_inv = lu.inverse();
        transform_model_columns(model, t_inv);
        ctx.C_z = (t * ctx.C_z * t.transpose()).eval();
        ctx.S = (t * ctx.S * t.transpose()).eval();
        backend.transform_latents(t);
        backend.broadcast_model(engine_model_from(model));
        il.data_before_transform = la.stats.J;
        il.data_after_transform = backend.objective_stats().J;
        il.offdiag_zz = offdiag_ratio(ctx.C_z);
        il.offdiag_c = offdiag_ratio(t_inv.transpose() * c_mat * t_inv);

        // Wishart expectation
        ctx.A_hat = update_A(ctx.C_z, ctx.S, ctx.nu0, ctx.Lambda0, n);
        model.A_hat = ctx.A_hat;

        il.sigma2 = model.sigma2;
        report.iterations.push_back(il);
        if (opt.on_iteration) opt.on_iteration(il);
    }
    return {std::move(model), std::move(report)};
}

std::tuple<ModelState, LatentState, TrainReport> train(const ImageDataset& ds,
                                                       const HyperParams& hyper,
                                                       std::uint64_t seed,
                                                       const TrainOptions& opt) {
    LocalBackend backend(ds, opt.threads);
    auto [model, report] = run_training(backend, hyper, seed, opt, nullptr);
    LatentState ls;
    ls.Z = backend.latents();
    ls.C_z = ls.Z * ls.Z.transpose();
    ls.S = Eigen::MatrixXd::Zero(model.K(), model.K());
    // S of the final latent sweep is what update_A consumed; recover it from
    // the identity A = (N+nu0)(C_z + S + Lambda0^-1)^-1
    const int k = model.K();
    Eigen::LLT<Eigen::MatrixXd> llt(model.A_hat);
    if (llt.info() == Eigen::Success) {
        const Eigen::MatrixXd inv_a =
            llt.solve(Eigen::MatrixXd::Identity(k, k)) * (ds.n_images + hyper.effective_nu0());
        Eigen::LLT<Eigen::MatrixXd> l0(hyper.effective_lambda0());
        ls.S = inv_a - ls.C_z - l0.solve(Eigen::MatrixXd::Identity(k, k));
    }
    return {std::move(model), std::move(ls), std::move(report)};
}

std::tuple<ModelState, LatentState, TrainReport> train_with_init(const ImageDataset& ds,
                                                                 const HyperParams& hyper,
                                                                 const LatentState& init,
                                                                 const TrainOptions& opt) {
    LocalBackend backend(ds, opt.threads);
    backend.configure(engine_config_from(hyper));
    backend.set_latents(init.Z);

    // order-independent second moment of the supplied latents
    const int k = static_cast<int>(init.Z.rows());
    std::vector<ExactSum> cz(static_cast<std::size_t>(k) * k);
    for (int n = 0; n < init.Z.cols(); ++n)
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) cz[i * k + j].add(init.Z(i, n) * init.Z(j, n));
    LatentState norm = init;
    norm.C_z = matrix_from(cz, k);

    auto [model, report] = run_training(backend, hyper, 0, opt, &norm);
    LatentState ls;
    ls.Z = backend.latents();
    ls.C_z = ls.Z * ls.Z.transpose();
    ls.S = Eigen::MatrixXd::Zero(k, k);
    return {std::move(model), std::move(ls), std::move(report)};
}

// ---------------------------------------------------------------------------
// Free-standing spec operations (unit-test surface over the same code paths)
// ---------------------------------------------------------------------------

namespace {

struct BoundLocal {
    LocalBackend backend;
    Ctx ctx;
    BoundLocal(const ImageDataset& ds, const ModelState& model, const LatentState& latents)
        : backend(ds, 1), ctx(model.hyper, ds.grid, ds.channels, ds.n_images) {
        backend.configure(engine_config_from(model.hyper));
        backend.set_latents(latents.Z);
        backend.broadcast_model(engine_model_from(model));
        ctx.A_hat = model.A_hat;
        ctx.C_z = latents.Z * latents.Z.transpose();
        ctx.S = latents.S;
    }
};

} // namespace

ObjectiveTerms objective_terms(const ImageDataset& ds, const ModelState& model,
                               const LatentState& latents) {
    BoundLocal bl(ds, model, latents);
    const ObjectiveStats st = bl.backend.objective_stats();
    return assemble_objective(bl.ctx, model, st.J);
}

double objective(const ImageDataset& ds, const ModelState& model, const LatentState& latents) {
    return objective_terms(ds, model, latents).total();
}

RegularisedPrecision regularised_precision(const ModelState& model) {
    Ctx ctx(model.hyper, model.grid, model.channels, 1);
    RegularisedPrecision rp;
    rp.C = compute_C(ctx, model);
    rp.P = model.hyper.lambda1 * model.A_hat + model.hyper.lambda2 * rp.C;
    rp.P = 0.5 * (rp.P + rp.P.transpose()).eval();
    return rp;
}

MeanAggregate mean_derivatives(const ImageDataset& ds, const ModelState& model,
                               const LatentState& latents) {
    BoundLocal bl(ds, model, latents);
    return bl.backend.mean_derivatives();
}

BasisAggregate shape_derivatives(const ImageDataset& ds, const ModelState& model,
                                 const LatentState& latents) {
    BoundLocal bl(ds, model, latents);
    return bl.backend.shape_derivatives();
}

BasisAggregate appearance_derivatives(const ImageDataset& ds, const ModelState& model,
                                      const LatentState& latents) {
    BoundLocal bl(ds, model, latents);
    return bl.backend.appearance_derivatives();
}

std::pair<ModelState, StepRecord> update_mean(const ImageDataset& ds, const ModelState& model,
                                              const LatentState& latents,
                                              const MeanAggregate& agg) {
    BoundLocal bl(ds, model, latents);
    ModelState out = model;
    StepRecord rec = mean_phase(bl.backend, bl.ctx, out, agg, 0, nullptr);
    return {std::move(out), rec};
}

std::pair<ModelState, StepRecord> update_shape_basis(const ImageDataset& ds,
                                                     const ModelState& model,
                                                     const LatentState& latents,
                                                     const BasisAggregate& agg,
                                                     double step_scale) {
    BoundLocal bl(ds, model, latents);
    ModelState out = model;
    StepRecord rec = basis_phase(bl.backend, bl.ctx, out, agg, true, 0, step_scale);
    return {std::move(out), rec};
}

std::pair<ModelState, StepRecord> update_appearance_basis(const ImageDataset& ds,
                                                          const ModelState& model,
                                                          const LatentState& latents,
                                                          const BasisAggregate& agg,
                                                          double step_scale) {
    BoundLocal bl(ds, model, latents);
    ModelState out = model;
    StepRecord rec = basis_phase(bl.backend, bl.ctx, out, agg, false, 0, step_scale);
    return {std::move(out), rec};
}

LatentState update_latents(const ImageDataset& ds, const ModelState& model,
                           const LatentState& latents, const RegularisedPrecision& prec) {
    BoundLocal bl(ds, model, latents);
    LatentAggregate la = bl.backend.update_latents(prec.P);
    LatentState out;
    out.Z = bl.backend.latents();
    out.S = la.S;
    out.C_z = la.C_z;
    return out;
}

} // namespace sam
