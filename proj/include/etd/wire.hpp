#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <set>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "etd/audio.hpp"
#include "etd/cascade.hpp"
#include "etd/nn/models.hpp"

namespace etd::wire {

inline constexpr uint32_t kRequestMagic = 0x45544451;
inline constexpr uint32_t kResponseMagic = 0x45544452;
inline constexpr uint8_t kProtocolVersion = 1;
inline constexpr uint32_t kMaxSamples = 16000u * 10u;  // 10 s hard cap
inline constexpr size_t kRequestHeaderBytes = 21;
inline constexpr size_t kResponseBytes = 18;

enum class WireErrorKind {
    BadMagic,
    BadVersion,
    Truncated,
    CapExceeded,
    InvalidVerdict,
    InvalidProbability,
    BadSampleRate,
    Io,
    Bind,
    Remote,
};

class WireError : public Error {
public:
    WireError(WireErrorKind k, const std::string& msg) : Error(msg), kind(k) {}
    WireErrorKind kind;
};

struct VerdictRequest {
    uint64_t request_id = 0;
    uint32_t sample_rate = kSampleRate;
    std::vector<int16_t> pcm;
    bool operator==(const VerdictRequest&) const = default;
};

struct VerdictResponse {
    uint64_t request_id = 0;
    uint8_t verdict = 0;  // Pause=0, Gap=1
    float p_gap = 0.0f;
    bool operator==(const VerdictResponse&) const = default;
};

// ---------------------------------------------------------------------------
// Codec, little-endian throughout.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline uint32_t get_u32(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
           static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}
inline uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

}  // namespace detail

inline std::string encode_request(const VerdictRequest& req) {
    if (req.pcm.size() > kMaxSamples)
        throw WireError(WireErrorKind::CapExceeded,
                        "pcm exceeds the 10 s cap: " + std::to_string(req.pcm.size()));
    std::string out;
    out.reserve(kRequestHeaderBytes + req.pcm.size() * 2);
    detail::put_u32(out, kRequestMagic);
    out.push_back(static_cast<char>(kProtocolVersion));
    detail::put_u64(out, req.request_id);
    detail::put_u32(out, req.sample_rate);
    detail::put_u32(out, static_cast<uint32_t>(req.pcm.size()));
    for (int16_t s : req.pcm) {
        out.push_back(static_cast<char>(s & 0xff));
        out.push_back(static_cast<char>((s >> 8) & 0xff));
    }
    return out;
}

inline VerdictRequest decode_request(const uint8_t* data, size_t len) {
    if (len < kRequestHeaderBytes)
        throw WireError(WireErrorKind::Truncated, "request shorter than header");
    if (detail::get_u32(data) != kRequestMagic)
        throw WireError(WireErrorKind::BadMagic, "bad request magic");
    if (data[4] != kProtocolVersion)
        throw WireError(WireErrorKind::BadVersion,
                        "bad protocol version " + std::to_string(data[4]));
    VerdictRequest req;
    req.request_id = detail::get_u64(data + 5);
    req.sample_rate = detail::get_u32(data + 13);
    const uint32_t n = detail::get_u32(data + 17);
    if (n > kMaxSamples)
        throw WireError(WireErrorKind::CapExceeded,
                        "pcm exceeds the 10 s cap: " + std::to_string(n));
    if (len < kRequestHeaderBytes + static_cast<size_t>(n) * 2)
        throw WireError(WireErrorKind::Truncated, "request payload truncated");
    req.pcm.resize(n);
    for (uint32_t i = 0; i < n; ++i) {
        const uint8_t* p = data + kRequestHeaderBytes + i * 2;
        req.pcm[i] = static_cast<int16_t>(p[0] | p[1] << 8);
    }
    return req;
}

inline VerdictRequest decode_request(const std::string& bytes) {
    return decode_request(reinterpret_cast<const uint8_t*>(bytes.data()),
                          bytes.size());
}

inline std::string encode_response(const VerdictResponse& resp) {
    std::string out;
    out.reserve(kResponseBytes);
    detail::put_u32(out, kResponseMagic);
    out.push_back(static_cast<char>(kProtocolVersion));
    detail::put_u64(out, resp.request_id);
    out.push_back(static_cast<char>(resp.verdict));
    uint32_t bits;
    std::memcpy(&bits, &resp.p_gap, 4);
    detail::put_u32(out, bits);
    return out;
}

inline VerdictResponse decode_response(const uint8_t* data, size_t len) {
    if (len < kResponseBytes)
        throw WireError(WireErrorKind::Truncated, "response truncated");
    if (detail::get_u32(data) != kResponseMagic)
        throw WireError(WireErrorKind::BadMagic, "bad response magic");
    if (data[4] != kProtocolVersion)
        throw WireError(WireErrorKind::BadVersion,
                        "bad protocol version " + std::to_string(data[4]));
    VerdictResponse resp;
    resp.request_id = detail::get_u64(data + 5);
    resp.verdict = data[13];
    if (resp.verdict > 1)
        throw WireError(WireErrorKind::InvalidVerdict,
                        "invalid verdict byte " + std::to_string(resp.verdict));
    const uint32_t bits = detail::get_u32(data + 14);
    std::memcpy(&resp.p_gap, &bits, 4);
    if (!(resp.p_gap >= 0.0f && resp.p_gap <= 1.0f))
        throw WireError(WireErrorKind::InvalidProbability,
                        "p_gap outside [0, 1]");
    if ((resp.p_gap >= 0.5f) != (resp.verdict == 1))
        throw WireError(WireErrorKind::InvalidVerdict,
                        "verdict byte inconsistent with p_gap");
    return resp;
}

inline VerdictResponse decode_response(const std::string& bytes) {
    return decode_response(reinterpret_cast<const uint8_t*>(bytes.data()),
                           bytes.size());
}

// ---------------------------------------------------------------------------
// Socket helpers
// ---------------------------------------------------------------------------

namespace detail {

inline bool read_exact(int fd, void* buf, size_t n) {
    auto* p = static_cast<uint8_t*>(buf);
    size_t got = 0;
    while (got < n) {
        const ssize_t r = ::recv(fd, p + got, n - got, 0);
        if (r <= 0) return false;
        got += static_cast<size_t>(r);
    }
    return true;
}

inline bool write_all(int fd, const void* buf, size_t n) {
    const auto* p = static_cast<const uint8_t*>(buf);
    size_t sent = 0;
    while (sent < n) {
        const ssize_t r = ::send(fd, p + sent, n - sent, MSG_NOSIGNAL);
        if (r <= 0) return false;
        sent += static_cast<size_t>(r);
    }
    return true;
}

}  // namespace detail

/// Effective artificial latency: an explicit value wins, otherwise the
/// ETD_SERVER_LATENCY_MS environment variable, otherwise zero.
inline int resolve_latency_ms(int flag_value = -1) {
    if (flag_value >= 0) return flag_value;
    if (const char* env = std::getenv("ETD_SERVER_LATENCY_MS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Server: one thread per connection, strictly sequential within a connection.
// Stateless across requests. Malformed requests get an error response with
// request_id 0, then the connection closes.
// ---------------------------------------------------------------------------

class Server {
public:
    Server(std::string host, uint16_t port, const nn::HeavyParams<float>& params,
           int latency_ms = -1, FeatureConfig feature_cfg = {})
        : host_(std::move(host)),
          port_(port),
          params_(params),
          latency_ms_(resolve_latency_ms(latency_ms)),
          feature_cfg_(feature_cfg) {}

    ~Server() { stop(); }

    void start() {
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listen_fd_ < 0) throw WireError(WireErrorKind::Bind, "socket() failed");
        const int one = 1;
        ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port_);
        if (::inet_pton(AF_INET, host_.c_str(), &addr.sin_addr) != 1)
            throw WireError(WireErrorKind::Bind, "bad listen address: " + host_);
        if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
            throw WireError(WireErrorKind::Bind,
                            "cannot bind " + host_ + ":" + std::to_string(port_));
        if (::listen(listen_fd_, 16) != 0)
            throw WireError(WireErrorKind::Bind, "listen() failed");
        socklen_t len = sizeof addr;
        ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
        running_ = true;
        acceptor_ = std::thread([this]() { accept_loop(); });
    }

    void stop() {
        if (!running_.exchange(false)) return;
        ::shutdown(listen_fd_, SHUT_RDWR);
        ::close(listen_fd_);
        if (acceptor_.joinable()) acceptor_.join();
        std::vector<std::thread> workers;
        {
            std::lock_guard<std::mutex> lock(mu_);
            for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
            workers.swap(workers_);
        }
        for (auto& t : workers)
            if (t.joinable()) t.join();
    }

    uint16_t port() const { return port_; }

private:
    void accept_loop() {
        while (running_) {
            pollfd pfd{listen_fd_, POLLIN, 0};
            const int ready = ::poll(&pfd, 1, 200);
            if (!running_) break;
            if (ready <= 0) continue;
            const int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) {
                if (errno == EINTR || errno == EAGAIN) continue;
                break;
            }
            std::lock_guard<std::mutex> lock(mu_);
            conn_fds_.insert(fd);
            workers_.emplace_back([this, fd]() {
                handle_connection(fd);
                {
                    std::lock_guard<std::mutex> inner(mu_);
                    conn_fds_.erase(fd);
                }
                ::close(fd);
            });
        }
    }

    void send_error(int fd) {
        const std::string bytes = encode_response({0, 0, 0.0f});
        detail::write_all(fd, bytes.data(), bytes.size());
    }

    void handle_connection(int fd) {
        std::vector<uint8_t> buf;
        while (running_) {
            uint8_t header[kRequestHeaderBytes];
            if (!detail::read_exact(fd, header, sizeof header)) break;
            VerdictRequest req;
            try {
                if (detail::get_u32(header) != kRequestMagic)
                    throw WireError(WireErrorKind::BadMagic, "bad request magic");
                if (header[4] != kProtocolVersion)
                    throw WireError(WireErrorKind::BadVersion, "bad version");
                const uint32_t n = detail::get_u32(header + 17);
                if (n > kMaxSamples)
                    throw WireError(WireErrorKind::CapExceeded, "cap exceeded");
                buf.assign(header, header + sizeof header);
                buf.resize(kRequestHeaderBytes + static_cast<size_t>(n) * 2);
                if (n > 0 && !detail::read_exact(fd, buf.data() + kRequestHeaderBytes,
                                                 static_cast<size_t>(n) * 2))
                    throw WireError(WireErrorKind::Truncated, "short read");
                req = decode_request(buf.data(), buf.size());
                if (req.sample_rate != static_cast<uint32_t>(kSampleRate))
                    throw WireError(WireErrorKind::BadSampleRate, "bad sample rate");
                if (req.pcm.empty())
                    throw WireError(WireErrorKind::Truncated, "empty pcm");
            } catch (const WireError&) {
                send_error(fd);
                break;
            }

            AudioBuffer audio;
            audio.samples = std::move(req.pcm);
            const FeatureSequence features = extract_features(audio, feature_cfg_);
            VerdictResponse resp;
            resp.request_id = req.request_id;
            if (features.n_frames == 0) {
                // Too short to frame; answer conservatively as Pause.
                resp.verdict = 0;
                resp.p_gap = 0.0f;
            } else {
                const auto probs = nn::heavy_forward(features, params_);
                resp.p_gap = probs[nn::kGapIndex];
                resp.verdict = resp.p_gap >= 0.5f ? 1 : 0;
            }
            if (latency_ms_ > 0)
                std::this_thread::sleep_for(std::chrono::milliseconds(latency_ms_));
            const std::string bytes = encode_response(resp);
            if (!detail::write_all(fd, bytes.data(), bytes.size())) break;
        }
    }

    std::string host_;
    uint16_t port_;
    const nn::HeavyParams<float>& params_;
    int latency_ms_;
    FeatureConfig feature_cfg_;
    int listen_fd_ = -1;
    std::atomic<bool> running_{false};
    std::thread acceptor_;
    std::mutex mu_;
    std::vector<std::thread> workers_;
    std::set<int> conn_fds_;
};

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

class Client {
public:
    Client(const std::string& host, uint16_t port) {
        fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd_ < 0) throw WireError(WireErrorKind::Io, "socket() failed");
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
            throw WireError(WireErrorKind::Io, "bad server address: " + host);
        if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
            ::close(fd_);
            fd_ = -1;
            throw WireError(WireErrorKind::Io,
                            "cannot connect to " + host + ":" + std::to_string(port));
        }
    }

    ~Client() {
        if (fd_ >= 0) ::close(fd_);
    }

    Client(const Client&) = delete;
    Client& operator=(const Client&) = delete;

    VerdictResponse roundtrip(const VerdictRequest& req) {
        const std::string bytes = encode_request(req);
        if (!detail::write_all(fd_, bytes.data(), bytes.size()))
            throw WireError(WireErrorKind::Io, "send failed");
        uint8_t resp[kResponseBytes];
        if (!detail::read_exact(fd_, resp, sizeof resp))
            throw WireError(WireErrorKind::Io, "connection closed by server");
        const VerdictResponse out = decode_response(resp, sizeof resp);
        if (out.request_id == 0 && req.request_id != 0)
            throw WireError(WireErrorKind::Remote, "server rejected the request");
        return out;
    }

private:
    int fd_ = -1;
};

/// Verdict provider that ships the escalation's trailing audio to a server.
/// The PCM slice is cut on the stream's hop grid so the server recomputes
/// byte-identical features.
class RemoteProvider : public VerdictProvider {
public:
    RemoteProvider(const std::string& host, uint16_t port, const AudioBuffer& audio,
                   const FeatureConfig& fc = {})
        : client_(host, port), audio_(audio), fc_(fc) {}

    Verdict classify(const EscalationIssued& request) override {
        const int hop = fc_.hop_samples();
        const int win = fc_.window_samples();
        const int first_frame = request.window_end_frame - request.window.n_frames;
        const size_t lo = static_cast<size_t>(first_frame) * hop;
        const size_t hi =
            std::min(audio_.samples.size(),
                     static_cast<size_t>(request.window_end_frame - 1) * hop + win);
        VerdictRequest req;
        req.request_id = request.id;
        req.pcm.assign(audio_.samples.begin() + lo, audio_.samples.begin() + hi);
        const VerdictResponse resp = client_.roundtrip(req);
        return {resp.verdict == 1 ? TurnState::Gap : TurnState::Pause, resp.p_gap};
    }

private:
    Client client_;
    const AudioBuffer& audio_;
    FeatureConfig fc_;
};

}  // namespace etd::wire
