#include <cstring>

#include "sam/distrib.hpp"
#include "sam/error.hpp"

namespace sam {

namespace {

int kind_code(DataKind k) { return static_cast<int>(k); }

void put_hilo_array(std::vector<std::uint8_t>& buf, const std::vector<std::int64_t>& dims,
                    const ExactArray& a) {
    std::vector<double> hi(a.size()), lo(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) a.at(i).to_hilo(hi[i], lo[i]);
    put_array(buf, dims, hi.data(), hi.size());
    put_array(buf, dims, lo.data(), lo.size());
}

void put_hilo_columns(std::vector<std::uint8_t>& buf, const std::vector<std::int64_t>& dims,
                      const std::vector<ExactArray>& cols) {
    std::size_t per = cols.empty() ? 0 : cols[0].size();
    std::vector<double> hi(cols.size() * per), lo(cols.size() * per);
    for (std::size_t k = 0; k < cols.size(); ++k)
        for (std::size_t i = 0; i < per; ++i)
            cols[k].at(i).to_hilo(hi[k * per + i], lo[k * per + i]);
    put_array(buf, dims, hi.data(), hi.size());
    put_array(buf, dims, lo.data(), lo.size());
}

void put_hilo_matrix(std::vector<std::uint8_t>& buf, const std::vector<ExactSum>& m, int k) {
    std::vector<double> hi(m.size()), lo(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i].to_hilo(hi[i], lo[i]);
    put_array(buf, {k, k}, hi.data(), hi.size());
    put_array(buf, {k, k}, lo.data(), lo.size());
}

struct WorkerState {
    ShardEngine engine;
    EngineConfig cfg;
    bool configured = false;

    WorkerState(const ImageDataset& shard, int threads) : engine(shard, 0) {
        engine.set_threads(threads);
    }
};

Frame handle_hello(WorkerState& ws, PayloadReader& pr) {
    const std::uint64_t proto = pr.u64();
    if (proto != 1) throw Error("worker: unsupported protocol version");
    const ImageDataset& sh = ws.engine.shard();
    std::vector<double> info{static_cast<double>(sh.grid.nd),
                             static_cast<double>(sh.grid.n[0]),
                             static_cast<double>(sh.grid.n[1]),
                             static_cast<double>(sh.grid.n[2]),
                             static_cast<double>(sh.channels),
                             static_cast<double>(kind_code(sh.kind)),
                             static_cast<double>(sh.n_images)};
    Frame r;
    r.type = static_cast<std::uint8_t>(MsgType::hello);
    put_array(r.payload, {static_cast<std::int64_t>(info.size())}, info.data(), info.size());
    return r;
}

Frame ack_frame() {
    Frame r;
    r.type = static_cast<std::uint8_t>(MsgType::agg_reply);
    put_u8(r.payload, static_cast<std::uint8_t>(DerivKind::ack));
    return r;
}

Frame handle_broadcast(WorkerState& ws, PayloadReader& pr) {
    auto cfg_arr = pr.array();
    if (cfg_arr.data.size() != 6) throw Error("worker: bad config array");
    auto omega = pr.array();
    if (omega.data.size() != 5) throw Error("worker: bad omega_v array");
    EngineConfig cfg;
    cfg.kind = static_cast<DataKind>(static_cast<int>(cfg_arr.data[0]));
    cfg.t_steps = static_cast<int>(cfg_arr.data[1]);
    cfg.K_a = static_cast<int>(cfg_arr.data[2]);
    cfg.K_v = static_cast<int>(cfg_arr.data[3]);
    cfg.shared_latents = cfg_arr.data[4] != 0.0;
    cfg.max_halvings = static_cast<int>(cfg_arr.data[5]);
    for (int i = 0; i < 5; ++i) cfg.omega_v[i] = omega.data[i];

    EngineModel em;
    em.mu = pr.array().data;
    em.W_a = pr.array().data;
    em.W_v = pr.array().data;
    em.sigma2 = pr.array().data;

    ws.cfg = cfg;
    ws.engine.configure(cfg);
    ws.engine.set_model(em);
    ws.configured = true;
    return ack_frame();
}

Frame handle_deriv(WorkerState& ws, PayloadReader& pr) {
    const auto kind = static_cast<DerivKind>(pr.u8());
    Frame r;
    r.type = static_cast<std::uint8_t>(MsgType::agg_reply);
    put_u8(r.payload, static_cast<std::uint8_t>(kind));

    if (kind == DerivKind::init_gram) {
        const std::uint64_t seed = pr.u64();
        const int k = static_cast<int>(pr.u32());
        const std::int64_t first = static_cast<std::int64_t>(pr.u64());
        ws.engine.set_first_index(first);
        const std::vector<ExactSum> gram = ws.engine.init_latents_gram(seed, k);
        put_hilo_matrix(r.payload, gram, k);
        return r;
    }
    if (!ws.configured) throw Error("worker: derivative request before model broadcast");
    const Grid& g = ws.engine.shard().grid;
    const std::int64_t m = g.voxels();
    const int c = ws.engine.shard().channels;
    const bool full = ws.cfg.kind == DataKind::categorical;
    const std::int64_t hc = full ? static_cast<std::int64_t>(BlockField::packed_size(c)) : c;

    switch (kind) {
        case DerivKind::mean: {
            MeanAgg a = ws.engine.mean_derivatives();
            put_hilo_array(r.payload, {c, m}, a.g);
            put_hilo_array(r.payload, {hc, m}, a.H);
            put_stats(r.payload, a.stats);
            return r;
        }
        case DerivKind::shape: {
            BasisAgg a = ws.engine.shape_derivatives();
            const std::int64_t dsym = static_cast<std::int64_t>(BlockField::packed_size(g.nd));
            put_hilo_columns(r.payload, {ws.cfg.K_v, g.nd, m}, a.g);
            put_hilo_columns(r.payload, {ws.cfg.K_v, dsym, m}, a.H);
            put_stats(r.payload, a.stats);
            return r;
        }
        case DerivKind::appearance: {
            BasisAgg a = ws.engine.appearance_derivatives();
            put_hilo_columns(r.payload, {ws.cfg.K_a, c, m}, a.g);
            put_hilo_columns(r.payload, {ws.cfg.K_a, hc, m}, a.H);
            put_stats(r.payload, a.stats);
            return r;
        }
        case DerivKind::objective: {
            StatsAgg s = ws.engine.objective_stats();
            put_stats(r.payload, s);
            return r;
        }
        default:
            throw Error("worker: unknown derivative kind");
    }
}

Frame handle_latent_update(WorkerState& ws, PayloadReader& pr) {
    if (!ws.configured) throw Error("worker: latent update before model broadcast");
    auto parr = pr.array();
    if (parr.dims.size() != 2 || parr.dims[0] != parr.dims[1])
        throw Error("worker: precision matrix must be square");
    const int k = static_cast<int>(parr.dims[0]);
    Eigen::MatrixXd p(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) p(i, j) = parr.data[static_cast<std::size_t>(i) * k + j];
    LatentAgg a = ws.engine.update_latents(p);
    Frame r;
    r.type = static_cast<std::uint8_t>(MsgType::latent_stats_reply);
    put_hilo_matrix(r.payload, a.S, k);
    put_hilo_matrix(r.payload, a.C_z, k);
    put_stats(r.payload, a.stats);
    return r;
}

Frame handle_transform(WorkerState& ws, PayloadReader& pr) {
    auto tarr = pr.array();
    if (tarr.dims.size() != 2 || tarr.dims[0] != tarr.dims[1])
        throw Error("worker: transform must be square");
    const int k = static_cast<int>(tarr.dims[0]);
    Eigen::MatrixXd t(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) t(i, j) = tarr.data[static_cast<std::size_t>(i) * k + j];
    ws.engine.transform_latents(t);
    return ack_frame();
}

} // namespace

void serve_worker_on(Listener& listener, const ImageDataset& shard, const WorkerOptions& opt) {
    WorkerState ws(shard, opt.threads);
    for (;;) {
        Connection conn = listener.accept_one();
        conn.set_observer(opt.observer);
        bool session_open = true;
        while (session_open) {
            Frame f;
            try {
                f = conn.receive();
            } catch (const Error&) {
                // peer went away without SHUTDOWN; keep serving new masters
                break;
            }
            try {
                PayloadReader pr(f.payload.data(), f.payload.size());
                switch (static_cast<MsgType>(f.type)) {
                    case MsgType::hello:
                        conn.send(handle_hello(ws, pr));
                        break;
                    case MsgType::model_broadcast:
                        conn.send(handle_broadcast(ws, pr));
                        break;
                    case MsgType::deriv_request:
                        conn.send(handle_deriv(ws, pr));
                        break;
                    case MsgType::latent_update_req:
                        conn.send(handle_latent_update(ws, pr));
                        break;
                    case MsgType::apply_transform:
                        conn.send(handle_transform(ws, pr));
                        break;
                    case MsgType::shutdown:
                        conn.send(ack_frame());
                        return;
                    default:
                        throw Error("worker: unknown message type " + std::to_string(f.type));
                }
            } catch (const std::exception& e) {
                Frame err;
                err.type = static_cast<std::uint8_t>(MsgType::error);
                const char* what = e.what();
                err.payload.assign(what, what + std::strlen(what));
                try {
                    conn.send(err);
                } catch (...) {
                }
                session_open = false; // close this connection, accept a new one
            }
        }
    }
}

void serve_worker(const ImageDataset& shard, std::uint16_t port, const WorkerOptions& opt) {
    Listener listener(port);
    serve_worker_on(listener, shard, opt);
}

} // namespace sam
