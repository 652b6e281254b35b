#include <cstring>

#include "sam/distrib.hpp"
#include "sam/error.hpp"

namespace sam {

namespace {

std::string frame_error_text(const Frame& f) {
    return std::string(f.payload.begin(), f.payload.end());
}

/// Aggregate-only backend over TCP workers. Requests go out to every worker
/// first; replies are read and combined in endpoint-list order.
class RemoteBackend : public Backend {
public:
    RemoteBackend(const std::vector<std::string>& endpoints, FrameObserver observer) {
        if (endpoints.empty()) throw Error("master: need at least one worker endpoint");
        for (const std::string& ep : endpoints) {
            conns_.emplace_back(connect_to(ep));
            conns_.back().set_observer(observer);
            names_.push_back(ep);
        }
        // HELLO round trip: grid/kind consistency and shard sizes
        Frame hello;
        hello.type = static_cast<std::uint8_t>(MsgType::hello);
        put_u64(hello.payload, 1);
        send_all(hello);
        for (std::size_t w = 0; w < conns_.size(); ++w) {
            Frame r = expect(w, MsgType::hello);
            PayloadReader pr(r.payload.data(), r.payload.size());
            auto info = pr.array();
            if (info.data.size() != 7) throw Error("master: bad hello reply from " + names_[w]);
            std::vector<int> dims;
            for (int d = 0; d < static_cast<int>(info.data[0]); ++d)
                dims.push_back(static_cast<int>(info.data[1 + d]));
            const Grid g(dims);
            const int c = static_cast<int>(info.data[4]);
            const DataKind k = static_cast<DataKind>(static_cast<int>(info.data[5]));
            const int n = static_cast<int>(info.data[6]);
            if (w == 0) {
                grid_ = g;
                channels_ = c;
                kind_ = k;
            } else if (g != grid_ || c != channels_ || k != kind_) {
                throw Error("master: worker " + names_[w] + " shard is incompatible");
            }
            offsets_.push_back(n_total_);
            n_total_ += n;
        }
    }

    Grid grid() const override { return grid_; }
    int channels() const override { return channels_; }
    DataKind kind() const override { return kind_; }
    int n_total() const override { return n_total_; }

    void configure(const EngineConfig& cfg) override { cfg_ = cfg; }

    void broadcast_model(const EngineModel& model) override {
        Frame f;
        f.type = static_cast<std::uint8_t>(MsgType::model_broadcast);
        const std::int64_t m = grid_.voxels();
        const std::vector<double> cfgv{static_cast<double>(static_cast<int>(cfg_.kind)),
                                       static_cast<double>(cfg_.t_steps),
                                       static_cast<double>(cfg_.K_a),
                                       static_cast<double>(cfg_.K_v),
                                       cfg_.shared_latents ? 1.0 : 0.0,
                                       static_cast<double>(cfg_.max_halvings)};
        put_array(f.payload, {6}, cfgv.data(), cfgv.size());
        put_array(f.payload, {5}, cfg_.omega_v.data(), 5);
        put_array(f.payload, {channels_, m}, model.mu.data(), model.mu.size());
        put_array(f.payload, {cfg_.K_a, channels_, m}, model.W_a.data(), model.W_a.size());
        put_array(f.payload, {cfg_.K_v, grid_.nd, m}, model.W_v.data(), model.W_v.size());
        put_array(f.payload, {channels_}, model.sigma2.data(), model.sigma2.size());
        send_all(f);
        for (std::size_t w = 0; w < conns_.size(); ++w) expect(w, MsgType::agg_reply);
    }

    Eigen::MatrixXd init_gram(std::uint64_t seed, int k) override {
        for (std::size_t w = 0; w < conns_.size(); ++w) {
            Frame f;
            f.type = static_cast<std::uint8_t>(MsgType::deriv_request);
            put_u8(f.payload, static_cast<std::uint8_t>(DerivKind::init_gram));
            put_u64(f.payload, seed);
            put_u32(f.payload, static_cast<std::uint32_t>(k));
            put_u64(f.payload, static_cast<std::uint64_t>(offsets_[w]));
            conns_[w].send(f);
        }
        std::vector<ExactSum> acc(static_cast<std::size_t>(k) * k);
        for (std::size_t w = 0; w < conns_.size(); ++w) {
            Frame r = expect(w, MsgType::agg_reply);
            PayloadReader pr(r.payload.data(), r.payload.size());
            check_kind(pr, DerivKind::init_gram, w);
            absorb_hilo(pr, acc);
        }
        Eigen::MatrixXd g(k, k);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) g(i, j) = acc[static_cast<std::size_t>(i) * k + j].value();
        return g;
    }

    void transform_latents(const Eigen::MatrixXd& t) override {
        Frame f;
        f.type = static_cast<std::uint8_t>(MsgType::apply_transform);
        const int k = static_cast<int>(t.rows());
        std::vector<double> row(static_cast<std::size_t>(k) * k);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) row[static_cast<std::size_t>(i) * k + j] = t(i, j);
        put_array(f.payload, {k, k}, row.data(), row.size());
        send_all(f);
        for (std::size_t w = 0; w < conns_.size(); ++w) expect(w, MsgType::agg_reply);
    }

    MeanAggregate mean_derivatives() override {
        request_deriv(DerivKind::mean);
        const std::int64_t m = grid_.voxels();
        const bool full = kind_ == DataKind::categorical;
        const std::size_t gsize = static_cast<std::size_t>(channels_) * m;
        const std::size_t hsize =
            (full ? BlockField::packed_size(channels_) : static_cast<std::size_t>(channels_)) * m;
        std::vector<ExactSum> g(gsize), h(hsize);
        StatsMerge stats;
        for (std::size_t w = 0; w < conns_.size(); ++w) {
            Frame r = expect(w, MsgType::agg_reply);
            PayloadReader pr(r.payload.data(), r.payload.size());
            check_kind(pr, DerivKind::mean, w);
            absorb_hilo(pr, g);
            absorb_hilo(pr, h);
            auto sa = pr.array();
            stats.absorb(sa, channels_);
        }
        MeanAggregate out;
        out.g = values_of(g);
        out.H.ncomp = channels_;
        out.H.full = full;
        out.H.h = values_of(h);
        out.stats = stats_of(stats);
        return out;
    }

    BasisAggregate shape_derivatives() override {
        request_deriv(DerivKind::shape);
        const std::int64_t m = grid_.voxels();
        const std::size_t gsize = static_cast<std::size_t>(grid_.nd) * m;
        const std::size_t hsize = BlockField::packed_size(grid_.nd) * m;
        return collect_basis(DerivKind::shape, cfg_.K_v, gsize, hsize, grid_.nd, true);
    }

    BasisAggregate appearance_derivatives() override {
        request_deriv(DerivKind::appearance);
        const std::int64_t m = grid_.voxels();
        const bool full = kind_ == DataKind::categorical;
        const std::size_t gsize = static_cast<std::size_t>(channels_) * m;
        const std::size_t hsize =
            (full ? BlockField::packed_size(channels_) : static_cast<std::size_t>(channels_)) * m;
        return collect_basis(DerivKind::appearance, cfg_.K_a, gsize, hsize, channels_, full);
    }

    ObjectiveStats objective_stats() override {
        request_deriv(DerivKind::objective);
        StatsMerge stats;
        for (std::size_t w = 0; w < conns_.size(); ++w) {
            Frame r = expect(w, MsgType::agg_reply);
            PayloadReader pr(r.payload.data(), r.payload.size());
            check_kind(pr, DerivKind::objective, w);
            auto sa = pr.array();
            stats.absorb(sa, channels_);
        }
        return stats_of(stats);
    }

    LatentAggregate update_latents(const Eigen::MatrixXd& p) override {
        Frame f;
        f.type = static_cast<std::uint8_t>(MsgType::latent_update_req);
        const int k = static_cast<int>(p.rows());
        std::vector<double> row(static_cast<std::size_t>(k) * k);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) row[static_cast<std::size_t>(i) * k + j] = p(i, j);
        put_array(f.payload, {k, k}, row.data(), row.size());
        send_all(f);

        std::vector<ExactSum> s(static_cast<std::size_t>(k) * k), cz(s.size());
        StatsMerge stats;
        for (std::size_t w = 0; w < conns_.size(); ++w) {
            Frame r = expect(w, MsgType::latent_stats_reply);
            PayloadReader pr(r.payload.data(), r.payload.size());
            absorb_hilo(pr, s);
            absorb_hilo(pr, cz);
            auto sa = pr.array();
            stats.absorb(sa, channels_);
        }
        LatentAggregate out;
        out.S.resize(k, k);
        out.C_z.resize(k, k);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
                out.S(i, j) = s[static_cast<std::size_t>(i) * k + j].value();
                out.C_z(i, j) = cz[static_cast<std::size_t>(i) * k + j].value();
            }
        out.stats = stats_of(stats);
        return out;
    }

    void shutdown() {
        Frame f;
        f.type = static_cast<std::uint8_t>(MsgType::shutdown);
        for (auto& c : conns_)
            if (c.valid()) c.send(f);
        for (std::size_t w = 0; w < conns_.size(); ++w)
            if (conns_[w].valid()) {
                try {
                    expect(w, MsgType::agg_reply);
                } catch (const Error&) {
                }
                conns_[w].close();
            }
    }

private:
    void send_all(const Frame& f) {
        for (auto& c : conns_) c.send(f);
    }

    Frame expect(std::size_t w, MsgType t) {
        Frame r = conns_[w].receive();
        if (r.type == static_cast<std::uint8_t>(MsgType::error))
            throw Error("master: worker " + names_[w] + " reported: " + frame_error_text(r));
        if (r.type != static_cast<std::uint8_t>(t))
            throw Error("master: unexpected reply type from " + names_[w]);
        return r;
    }

    void check_kind(PayloadReader& pr, DerivKind k, std::size_t w) {
        if (pr.u8() != static_cast<std::uint8_t>(k))
            throw Error("master: reply kind mismatch from " + names_[w]);
    }

    void request_deriv(DerivKind k) {
        Frame f;
        f.type = static_cast<std::uint8_t>(MsgType::deriv_request);
        put_u8(f.payload, static_cast<std::uint8_t>(k));
        send_all(f);
    }

    static void absorb_hilo(PayloadReader& pr, std::vector<ExactSum>& acc) {
        auto hi = pr.array();
        auto lo = pr.array();
        if (hi.data.size() != acc.size() || lo.data.size() != acc.size())
            throw Error("master: aggregate size mismatch");
        for (std::size_t i = 0; i < acc.size(); ++i) {
            acc[i].add(hi.data[i]);
            acc[i].add(lo.data[i]);
        }
    }

    static std::vector<double> values_of(const std::vector<ExactSum>& acc) {
        std::vector<double> out(acc.size());
        for (std::size_t i = 0; i < acc.size(); ++i) out[i] = acc[i].value();
        return out;
    }

    static ObjectiveStats stats_of(const StatsMerge& s) {
        ObjectiveStats o;
        o.J = s.J.value();
        o.rss.resize(s.rss.size());
        for (std::size_t c = 0; c < s.rss.size(); ++c) o.rss[c] = s.rss[c].value();
        o.observed = static_cast<double>(s.observed);
        o.halvings = s.halvings;
        o.rejected = s.rejected;
        return o;
    }

    BasisAggregate collect_basis(DerivKind k, int cols, std::size_t gsize, std::size_t hsize,
                                 int block_comp, bool full) {
        std::vector<ExactSum> g(static_cast<std::size_t>(cols) * gsize);
        std::vector<ExactSum> h(static_cast<std::size_t>(cols) * hsize);
        StatsMerge stats;
        for (std::size_t w = 0; w < conns_.size(); ++w) {
            Frame r = expect(w, MsgType::agg_reply);
            PayloadReader pr(r.payload.data(), r.payload.size());
            check_kind(pr, k, w);
            absorb_hilo(pr, g);
            absorb_hilo(pr, h);
            auto sa = pr.array();
            stats.absorb(sa, channels_);
        }
        BasisAggregate out;
        out.g.resize(cols);
        out.H.resize(cols);
        for (int c = 0; c < cols; ++c) {
            out.g[c].resize(gsize);
            for (std::size_t i = 0; i < gsize; ++i)
                out.g[c][i] = g[static_cast<std::size_t>(c) * gsize + i].value();
            out.H[c].ncomp = block_comp;
            out.H[c].full = full;
            out.H[c].h.resize(hsize);
            for (std::size_t i = 0; i < hsize; ++i)
                out.H[c].h[i] = h[static_cast<std::size_t>(c) * hsize + i].value();
        }
        out.stats = stats_of(stats);
        return out;
    }

    std::vector<Connection> conns_;
    std::vector<std::string> names_;
    std::vector<int> offsets_;
    Grid grid_;
    int channels_ = 0;
    DataKind kind_ = DataKind::continuous;
    int n_total_ = 0;
    EngineConfig cfg_;
};

} // namespace

std::pair<ModelState, TrainReport> master_train(const std::vector<std::string>& endpoints,
                                                const HyperParams& hyper, std::uint64_t seed,
                                                const MasterOptions& opt) {
    RemoteBackend backend(endpoints, opt.observer);
    TrainOptions topt;
    topt.on_iteration = opt.on_iteration;
    auto out = run_training(backend, hyper, seed, topt, nullptr);
    backend.shutdown();
    return out;
}

} // namespace sam
