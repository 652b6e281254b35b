#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sam/engine.hpp"

namespace sam {

/// Length-prefixed frames over a reliable byte stream:
///   u32 LE payload length | u8 msg_type | payload.
enum class MsgType : std::uint8_t {
    hello = 0x01,
    model_broadcast = 0x02,
    deriv_request = 0x03,
    agg_reply = 0x04,
    latent_update_req = 0x05,
    latent_stats_reply = 0x06,
    apply_transform = 0x07,
    error = 0x7F,
    shutdown = 0xFF,
};

enum class DerivKind : std::uint8_t {
    mean = 0,
    shape = 1,
    appearance = 2,
    objective = 3,
    init_gram = 4,
    ack = 0x7E,
};

struct Frame {
    std::uint8_t type = 0;
    std::vector<std::uint8_t> payload;
};

/// (outgoing, msg_type, payload_length) — lets tests audit a wire capture.
using FrameObserver = std::function<void(bool, std::uint8_t, std::uint32_t)>;

class Connection {
public:
    explicit Connection(int fd) : fd_(fd) {}
    Connection(Connection&& o) noexcept : fd_(o.fd_), observer_(std::move(o.observer_)) {
        o.fd_ = -1;
    }
    Connection& operator=(Connection&&) = delete;
    Connection(const Connection&) = delete;
    ~Connection();

    void send(const Frame& f);
    Frame receive();
    void set_observer(FrameObserver obs) { observer_ = std::move(obs); }
    bool valid() const { return fd_ >= 0; }
    void close();

private:
    int fd_ = -1;
    FrameObserver observer_;
};

class Listener {
public:
    explicit Listener(std::uint16_t port); // 0 = ephemeral
    ~Listener();
    Listener(const Listener&) = delete;
    std::uint16_t port() const { return port_; }
    Connection accept_one();
    void close();

private:
    int fd_ = -1;
    std::uint16_t port_ = 0;
};

Connection connect_to(const std::string& endpoint); // "host:port"

// --- payload builders -------------------------------------------------------
// Arrays: 16-byte shape header (u32 ndim, u32 d0, u32 d1, u32 d2) followed by
// float64 little-endian data.

void put_u8(std::vector<std::uint8_t>& buf, std::uint8_t v);
void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& buf, std::uint64_t v);
void put_array(std::vector<std::uint8_t>& buf, const std::vector<std::int64_t>& dims,
               const double* data, std::size_t count);

class PayloadReader {
public:
    PayloadReader(const std::uint8_t* p, std::size_t n) : p_(p), end_(p + n) {}
    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    struct Array {
        std::vector<std::int64_t> dims;
        std::vector<double> data;
    };
    Array array();
    bool done() const { return p_ == end_; }

private:
    const std::uint8_t* p_;
    const std::uint8_t* end_;
};

/// Scalar aggregates on the wire: [J_hi, J_lo, observed, halvings, rejected,
/// rss_hi..., rss_lo...].
void put_stats(std::vector<std::uint8_t>& buf, const StatsAgg& s);

/// Accumulates worker stats replies exactly (order independent).
struct StatsMerge {
    ExactSum J;
    std::vector<ExactSum> rss;
    std::int64_t observed = 0;
    std::int64_t halvings = 0;
    std::int64_t rejected = 0;
    void absorb(PayloadReader::Array& a, int channels);
};

} // namespace sam
