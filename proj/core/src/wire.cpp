#include "sam/wire.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <bit>
#include <cstring>

#include "sam/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "wire codecs assume a little-endian host");

namespace sam {

namespace {

constexpr std::uint32_t kMaxFrame = 1u << 30;

void write_all(int fd, const void* data, std::size_t n) {
    const char* p = static_cast<const char*>(data);
    while (n > 0) {
        const ssize_t w = ::write(fd, p, n);
        if (w <= 0) throw Error("wire: connection closed while writing");
        p += w;
        n -= static_cast<std::size_t>(w);
    }
}

void read_all(int fd, void* data, std::size_t n) {
    char* p = static_cast<char*>(data);
    while (n > 0) {
        const ssize_t r = ::read(fd, p, n);
        if (r <= 0) throw Error("wire: connection closed while reading");
        p += r;
        n -= static_cast<std::size_t>(r);
    }
}

} // namespace

Connection::~Connection() { close(); }

void Connection::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

void Connection::send(const Frame& f) {
    if (fd_ < 0) throw Error("wire: send on closed connection");
    const std::uint32_t len = static_cast<std::uint32_t>(f.payload.size());
    std::uint8_t head[5];
    std::memcpy(head, &len, 4);
    head[4] = f.type;
    write_all(fd_, head, 5);
    if (len > 0) write_all(fd_, f.payload.data(), len);
    if (observer_) observer_(true, f.type, len);
}

Frame Connection::receive() {
    if (fd_ < 0) throw Error("wire: receive on closed connection");
    std::uint8_t head[5];
    read_all(fd_, head, 5);
    std::uint32_t len;
    std::memcpy(&len, head, 4);
    if (len > kMaxFrame) throw Error("wire: frame length " + std::to_string(len) + " exceeds cap");
    Frame f;
    f.type = head[4];
    f.payload.resize(len);
    if (len > 0) read_all(fd_, f.payload.data(), len);
    if (observer_) observer_(false, f.type, len);
    return f;
}

Listener::Listener(std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw Error("wire: cannot create socket");
    const int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    addr.sin_port = htons(port);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(fd_);
        throw Error("wire: cannot bind port " + std::to_string(port));
    }
    if (::listen(fd_, 4) != 0) {
        ::close(fd_);
        throw Error("wire: listen failed");
    }
    socklen_t alen = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &alen);
    port_ = ntohs(addr.sin_port);
}

Listener::~Listener() { close(); }

void Listener::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

Connection Listener::accept_one() {
    const int cfd = ::accept(fd_, nullptr, nullptr);
    if (cfd < 0) throw Error("wire: accept failed");
    const int one = 1;
    ::setsockopt(cfd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return Connection(cfd);
}

Connection connect_to(const std::string& endpoint) {
    const auto colon = endpoint.rfind(':');
    if (colon == std::string::npos)
        throw Error("wire: endpoint must be host:port, got '" + endpoint + "'");
    const std::string host = endpoint.substr(0, colon);
    const std::string port = endpoint.substr(colon + 1);

    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), port.c_str(), &hints, &res) != 0 || !res)
        throw Error("wire: cannot resolve " + endpoint);
    int fd = -1;
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
        fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw Error("wire: cannot connect to " + endpoint);
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return Connection(fd);
}

// --- payload codecs ---------------------------------------------------------

void put_u8(std::vector<std::uint8_t>& buf, std::uint8_t v) { buf.push_back(v); }

void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
    const std::size_t at = buf.size();
    buf.resize(at + 4);
    std::memcpy(buf.data() + at, &v, 4);
}

void put_u64(std::vector<std::uint8_t>& buf, std::uint64_t v) {
    const std::size_t at = buf.size();
    buf.resize(at + 8);
    std::memcpy(buf.data() + at, &v, 8);
}

void put_array(std::vector<std::uint8_t>& buf, const std::vector<std::int64_t>& dims,
               const double* data, std::size_t count) {
    if (dims.empty() || dims.size() > 3) throw Error("wire: arrays are rank 1..3");
    std::int64_t total = 1;
    for (std::int64_t d : dims) total *= d;
    if (static_cast<std::size_t>(total) != count) throw Error("wire: array size mismatch");
    put_u32(buf, static_cast<std::uint32_t>(dims.size()));
    for (std::size_t i = 0; i < 3; ++i)
        put_u32(buf, i < dims.size() ? static_cast<std::uint32_t>(dims[i]) : 1u);
    const std::size_t at = buf.size();
    buf.resize(at + count * sizeof(double));
    std::memcpy(buf.data() + at, data, count * sizeof(double));
}

std::uint8_t PayloadReader::u8() {
    if (end_ - p_ < 1) throw Error("wire: truncated payload");
    return *p_++;
}

std::uint32_t PayloadReader::u32() {
    if (end_ - p_ < 4) throw Error("wire: truncated payload");
    std::uint32_t v;
    std::memcpy(&v, p_, 4);
    p_ += 4;
    return v;
}

std::uint64_t PayloadReader::u64() {
    if (end_ - p_ < 8) throw Error("wire: truncated payload");
    std::uint64_t v;
    std::memcpy(&v, p_, 8);
    p_ += 8;
    return v;
}

PayloadReader::Array PayloadReader::array() {
    Array a;
    const std::uint32_t nd = u32();
    if (nd < 1 || nd > 3) throw Error("wire: bad array rank");
    std::int64_t total = 1;
    for (std::uint32_t i = 0; i < 3; ++i) {
        const std::uint32_t d = u32();
        if (i < nd) {
            a.dims.push_back(d);
            total *= d;
        } else if (d != 1) {
            throw Error("wire: bad array header padding");
        }
    }
    const std::size_t bytes = static_cast<std::size_t>(total) * sizeof(double);
    if (static_cast<std::size_t>(end_ - p_) < bytes) throw Error("wire: truncated array");
    a.data.resize(static_cast<std::size_t>(total));
    std::memcpy(a.data.data(), p_, bytes);
    p_ += bytes;
    return a;
}

void put_stats(std::vector<std::uint8_t>& buf, const StatsAgg& s) {
    std::vector<double> v;
    double hi, lo;
    s.J.to_hilo(hi, lo);
    v.push_back(hi);
    v.push_back(lo);
    v.push_back(static_cast<double>(s.observed));
    v.push_back(static_cast<double>(s.halvings));
    v.push_back(static_cast<double>(s.rejected));
    for (const ExactSum& r : s.rss) {
        r.to_hilo(hi, lo);
        v.push_back(hi);
        v.push_back(lo);
    }
    put_array(buf, {static_cast<std::int64_t>(v.size())}, v.data(), v.size());
}

void StatsMerge::absorb(PayloadReader::Array& a, int channels) {
    if (static_cast<int>(a.data.size()) != 5 + 2 * channels)
        throw Error("wire: stats array size mismatch");
    if (rss.empty()) rss.resize(channels);
    J.add(a.data[0]);
    J.add(a.data[1]);
    observed += static_cast<std::int64_t>(a.data[2]);
    halvings += static_cast<std::int64_t>(a.data[3]);
    rejected += static_cast<std::int64_t>(a.data[4]);
    for (int c = 0; c < channels; ++c) {
        rss[c].add(a.data[5 + 2 * c]);
        rss[c].add(a.data[6 + 2 * c]);
    }
}

} // namespace sam
