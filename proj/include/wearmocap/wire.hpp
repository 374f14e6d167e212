#pragma once

// Binary sensor-frame codec plus the UDP plumbing that moves frames and
// poses around: one frame per datagram, little-endian f32 payloads, no
// retransmission. Stale datagrams (seq <= last delivered) are dropped so
// consumers always see strictly increasing sequence numbers per device.

#include <arpa/inet.h>
#include <netdb.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "wearmocap/errors.hpp"
#include "wearmocap/geometry.hpp"
#include "wearmocap/log.hpp"

namespace wearmocap::wire {

enum class DeviceKind : std::uint8_t { Watch = 0, PhoneUpperArm = 1, PhonePocket = 2 };
enum class TrackingMode : std::uint8_t { WatchOnly = 0, UpperArm = 1, Pocket = 2 };

inline const char* to_string(TrackingMode m) {
    switch (m) {
        case TrackingMode::WatchOnly: return "watch_only";
        case TrackingMode::UpperArm: return "upper_arm";
        case TrackingMode::Pocket: return "pocket";
    }
    return "?";
}

// One timestamped device sample. Pressure rides along only on watch frames.
struct SensorFrame {
    DeviceKind device_kind = DeviceKind::Watch;
    std::uint32_t device_id = 0;
    std::uint32_t seq = 0;
    std::uint64_t timestamp_us = 0;
    Vec3 accel;
    Vec3 gyro;
    Quaternion orientation;
    std::optional<double> pressure_hpa;

    bool valid() const {
        if (!accel.finite() || !gyro.finite() || !orientation.finite()) return false;
        if (std::abs(orientation.norm() - 1.0) > 1e-3) return false;
        const bool want_pressure = device_kind == DeviceKind::Watch;
        if (pressure_hpa.has_value() != want_pressure) return false;
        if (pressure_hpa) {
            if (!std::isfinite(*pressure_hpa)) return false;
            if (*pressure_hpa <= 300.0 || *pressure_hpa >= 1200.0) return false;
        }
        return true;
    }
};

// Estimator output on the wire: segment orientations plus the joint
// positions implied by forward kinematics. q_hi present iff Pocket mode.
struct PoseMessage {
    std::uint64_t timestamp_us = 0;
    TrackingMode mode = TrackingMode::WatchOnly;
    Quaternion q_la;
    Quaternion q_ua;
    std::optional<Quaternion> q_hi;
    Vec3 shoulder, elbow, wrist;

    bool valid() const {
        if (!q_la.finite() || !q_ua.finite()) return false;
        if (std::abs(q_la.norm() - 1.0) > 1e-3 || std::abs(q_ua.norm() - 1.0) > 1e-3)
            return false;
        if (q_hi.has_value() != (mode == TrackingMode::Pocket)) return false;
        if (q_hi && (!q_hi->finite() || std::abs(q_hi->norm() - 1.0) > 1e-3)) return false;
        return shoulder.finite() && elbow.finite() && wrist.finite();
    }
};

enum class WireError {
    ok = 0,
    short_packet,   // buffer smaller than the declared layout
    unknown_packet, // magic mismatch
    invalid_frame,  // layout fine, field invariants violated
};

inline const char* to_string(WireError e) {
    switch (e) {
        case WireError::ok: return "ok";
        case WireError::short_packet: return "short_packet";
        case WireError::unknown_packet: return "unknown_packet";
        case WireError::invalid_frame: return "invalid_frame";
    }
    return "?";
}

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    std::span<const std::uint8_t> buf;
    std::size_t pos = 0;

    bool need(std::size_t n) const { return pos + n <= buf.size(); }
    std::uint8_t u8() { return buf[pos++]; }
    std::uint16_t u16() {
        std::uint16_t v = static_cast<std::uint16_t>(buf[pos]) |
                          static_cast<std::uint16_t>(buf[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

inline void put_vec3(std::vector<std::uint8_t>& out, const Vec3& v) {
    put_f32(out, static_cast<float>(v.x));
    put_f32(out, static_cast<float>(v.y));
    put_f32(out, static_cast<float>(v.z));
}
inline void put_quat(std::vector<std::uint8_t>& out, const Quaternion& q) {
    put_f32(out, static_cast<float>(q.w));
    put_f32(out, static_cast<float>(q.x));
    put_f32(out, static_cast<float>(q.y));
    put_f32(out, static_cast<float>(q.z));
}
inline Vec3 read_vec3(Reader& r) {
    Vec3 v;
    v.x = r.f32();
    v.y = r.f32();
    v.z = r.f32();
    return v;
}
inline Quaternion read_quat(Reader& r) {
    Quaternion q;
    q.w = r.f32();
    q.x = r.f32();
    q.y = r.f32();
    q.z = r.f32();
    return q;
}

} // namespace detail

inline constexpr char kFrameMagic[4] = {'W', 'M', 'C', '1'};
inline constexpr char kPoseMagic[4] = {'W', 'M', 'P', '1'};
inline constexpr std::size_t kFrameBytes = 62;              // without pressure
inline constexpr std::size_t kFrameBytesWithPressure = 66;  // watch frames

// Layout, little-endian: magic "WMC1" (4), device_kind (1),
// flags (1, bit0 = pressure present), device_id (4), seq (4),
// timestamp_us (8), accel (3xf32), gyro (3xf32), orientation wxyz (4xf32),
// pressure (f32, present iff flag).
inline std::vector<std::uint8_t> encode_frame(const SensorFrame& f) {
    if (!f.valid()) throw ValidationError("encode rejected: invalid sensor frame");
    std::vector<std::uint8_t> out;
    out.reserve(kFrameBytesWithPressure);
    out.insert(out.end(), kFrameMagic, kFrameMagic + 4);
    out.push_back(static_cast<std::uint8_t>(f.device_kind));
    out.push_back(f.pressure_hpa ? 0x01 : 0x00);
    detail::put_u32(out, f.device_id);
    detail::put_u32(out, f.seq);
    detail::put_u64(out, f.timestamp_us);
    detail::put_vec3(out, f.accel);
    detail::put_vec3(out, f.gyro);
    detail::put_quat(out, f.orientation);
    if (f.pressure_hpa) detail::put_f32(out, static_cast<float>(*f.pressure_hpa));
    return out;
}

inline WireError decode_frame(std::span<const std::uint8_t> bytes, SensorFrame& out) {
    if (bytes.size() < 4) return WireError::short_packet;
    if (std::memcmp(bytes.data(), kFrameMagic, 4) != 0) return WireError::unknown_packet;
    if (bytes.size() < kFrameBytes) return WireError::short_packet;

    detail::Reader r{bytes, 4};
    const std::uint8_t kind = r.u8();
    const std::uint8_t flags = r.u8();
    if (kind > 2) return WireError::invalid_frame;
    const bool has_pressure = (flags & 0x01) != 0;
    const std::size_t want = has_pressure ? kFrameBytesWithPressure : kFrameBytes;
    if (bytes.size() < want) return WireError::short_packet;
    if (bytes.size() != want) return WireError::invalid_frame;

    SensorFrame f;
    f.device_kind = static_cast<DeviceKind>(kind);
    f.device_id = r.u32();
    f.seq = r.u32();
    f.timestamp_us = r.u64();
    f.accel = detail::read_vec3(r);
    f.gyro = detail::read_vec3(r);
    f.orientation = detail::read_quat(r);
    if (has_pressure) f.pressure_hpa = r.f32();
    if (!f.valid()) return WireError::invalid_frame;
    out = f;
    return WireError::ok;
}

// Layout mirrors the frame codec: magic "WMP1" (4), mode (1),
// flags (1, bit0 = q_hi present), timestamp_us (8), q_la (4xf32),
// q_ua (4xf32), q_hi (4xf32 iff flag), shoulder/elbow/wrist (9xf32).
inline std::vector<std::uint8_t> encode_pose(const PoseMessage& m) {
    if (!m.valid()) throw ValidationError("encode rejected: invalid pose message");
    std::vector<std::uint8_t> out;
    out.reserve(98);
    out.insert(out.end(), kPoseMagic, kPoseMagic + 4);
    out.push_back(static_cast<std::uint8_t>(m.mode));
    out.push_back(m.q_hi ? 0x01 : 0x00);
    detail::put_u64(out, m.timestamp_us);
    detail::put_quat(out, m.q_la);
    detail::put_quat(out, m.q_ua);
    if (m.q_hi) detail::put_quat(out, *m.q_hi);
    detail::put_vec3(out, m.shoulder);
    detail::put_vec3(out, m.elbow);
    detail::put_vec3(out, m.wrist);
    return out;
}

inline WireError decode_pose(std::span<const std::uint8_t> bytes, PoseMessage& out) {
    constexpr std::size_t base = 4 + 1 + 1 + 8 + 16 + 16 + 36;
    if (bytes.size() < 4) return WireError::short_packet;
    if (std::memcmp(bytes.data(), kPoseMagic, 4) != 0) return WireError::unknown_packet;
    if (bytes.size() < base) return WireError::short_packet;

    detail::Reader r{bytes, 4};
    const std::uint8_t mode = r.u8();
    const std::uint8_t flags = r.u8();
    if (mode > 2) return WireError::invalid_frame;
    const bool has_hi = (flags & 0x01) != 0;
    const std::size_t want = base + (has_hi ? 16 : 0);
    if (bytes.size() < want) return WireError::short_packet;
    if (bytes.size() != want) return WireError::invalid_frame;

    PoseMessage m;
    m.mode = static_cast<TrackingMode>(mode);
    m.timestamp_us = r.u64();
    m.q_la = detail::read_quat(r);
    m.q_ua = detail::read_quat(r);
    if (has_hi) m.q_hi = detail::read_quat(r);
    m.shoulder = detail::read_vec3(r);
    m.elbow = detail::read_vec3(r);
    m.wrist = detail::read_vec3(r);
    if (!m.valid()) return WireError::invalid_frame;
    out = m;
    return WireError::ok;
}

// ---------------------------------------------------------------------------
// UDP plumbing
// ---------------------------------------------------------------------------

struct Endpoint {
    std::string host;
    std::uint16_t port = 0;
};

// "host:port" -> Endpoint.
inline Endpoint parse_endpoint(const std::string& s) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos || colon + 1 >= s.size())
        throw ValidationError("endpoint must be host:port, got '" + s + "'");
    Endpoint ep;
    ep.host = s.substr(0, colon);
    const long port = std::strtol(s.c_str() + colon + 1, nullptr, 10);
    // Port 0 asks the OS for an ephemeral port when binding.
    if (port < 0 || port > 65535)
        throw ValidationError("endpoint port out of range in '" + s + "'");
    ep.port = static_cast<std::uint16_t>(port);
    return ep;
}

// Minimal RAII wrapper around an IPv4 UDP socket.
class UdpSocket {
public:
    UdpSocket() = default;
    UdpSocket(UdpSocket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
    UdpSocket& operator=(UdpSocket&& o) noexcept {
        if (this != &o) {
            close_fd();
            fd_ = o.fd_;
            o.fd_ = -1;
        }
        return *this;
    }
    UdpSocket(const UdpSocket&) = delete;
    UdpSocket& operator=(const UdpSocket&) = delete;
    ~UdpSocket() { close_fd(); }

    static UdpSocket bound(const Endpoint& ep) {
        UdpSocket s;
        s.fd_ = ::socket(AF_INET, SOCK_DGRAM, 0);
        if (s.fd_ < 0) throw BindError("socket() failed");
        int reuse = 1;
        ::setsockopt(s.fd_, SOL_SOCKET, SO_REUSEADDR, &reuse, sizeof(reuse));
        sockaddr_in addr = resolve(ep);
        if (::bind(s.fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
            throw BindError("cannot bind " + ep.host + ":" + std::to_string(ep.port) + ": " +
                            std::strerror(errno));
        return s;
    }

    // Connected socket so ICMP errors surface on later sends.
    static UdpSocket connected(const Endpoint& ep) {
        UdpSocket s;
        s.fd_ = ::socket(AF_INET, SOCK_DGRAM, 0);
        if (s.fd_ < 0) throw BindError("socket() failed");
        sockaddr_in addr = resolve(ep);
        if (::connect(s.fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
            throw BindError("cannot connect " + ep.host + ":" + std::to_string(ep.port) + ": " +
                            std::strerror(errno));
        return s;
    }

    bool send(std::span<const std::uint8_t> bytes) const {
        return ::send(fd_, bytes.data(), bytes.size(), 0) ==
               static_cast<ssize_t>(bytes.size());
    }

    // Returns bytes received, 0 on timeout, -1 on error.
    ssize_t recv(std::span<std::uint8_t> buf, int timeout_ms) const {
        timeval tv{timeout_ms / 1000, (timeout_ms % 1000) * 1000};
        ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
        const ssize_t n = ::recv(fd_, buf.data(), buf.size(), 0);
        if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) return 0;
        return n;
    }

    std::uint16_t local_port() const {
        sockaddr_in addr{};
        socklen_t len = sizeof(addr);
        if (::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len) != 0) return 0;
        return ntohs(addr.sin_port);
    }

    int fd() const { return fd_; }

private:
    static sockaddr_in resolve(const Endpoint& ep) {
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(ep.port);
        if (ep.host.empty() || ep.host == "0.0.0.0") {
            addr.sin_addr.s_addr = INADDR_ANY;
            return addr;
        }
        if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) == 1) return addr;
        addrinfo hints{};
        hints.ai_family = AF_INET;
        hints.ai_socktype = SOCK_DGRAM;
        addrinfo* res = nullptr;
        if (::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || !res)
            throw BindError("cannot resolve host '" + ep.host + "'");
        addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
        ::freeaddrinfo(res);
        return addr;
    }

    void close_fd() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

    int fd_ = -1;
};

// A frame plus the steady-clock instant it entered the queue, so the
// consumer can account for queueing delay in its latency numbers.
struct StampedFrame {
    SensorFrame frame;
    std::chrono::steady_clock::time_point arrival;
};

// Single-producer single-consumer frame queue; ingest pushes, one
// estimation context pops.
class FrameQueue {
public:
    void push(const SensorFrame& f) {
        {
            std::lock_guard<std::mutex> lock(mu_);
            if (q_.size() >= kMaxDepth) q_.pop_front();
            q_.push_back({f, std::chrono::steady_clock::now()});
        }
        cv_.notify_one();
    }

    std::optional<StampedFrame> pop(int timeout_ms) {
        std::unique_lock<std::mutex> lock(mu_);
        if (!cv_.wait_for(lock, std::chrono::milliseconds(timeout_ms),
                          [&] { return !q_.empty(); }))
            return std::nullopt;
        StampedFrame f = q_.front();
        q_.pop_front();
        return f;
    }

    std::optional<StampedFrame> try_pop() {
        std::lock_guard<std::mutex> lock(mu_);
        if (q_.empty()) return std::nullopt;
        StampedFrame f = q_.front();
        q_.pop_front();
        return f;
    }

    std::size_t size() const {
        std::lock_guard<std::mutex> lock(mu_);
        return q_.size();
    }

private:
    static constexpr std::size_t kMaxDepth = 4096;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<StampedFrame> q_;
};

struct RouterStats {
    std::uint64_t delivered = 0;
    std::uint64_t dropped_stale = 0;
    std::uint64_t decode_errors = 0;
};

// Routes decoded frames into one ordered queue per device kind and
// enforces the drop-stale policy per device id. Consumers can block on
// "anything arrived" so a pairing decision never waits a full frame
// period for the second stream.
class SessionRouter {
public:
    FrameQueue& queue(DeviceKind kind) { return queues_[static_cast<int>(kind)]; }

    bool route(const SensorFrame& f) {
        {
            std::lock_guard<std::mutex> lock(mu_);
            auto [it, inserted] = last_seq_.try_emplace(f.device_id, 0);
            if (!inserted && f.seq <= it->second) {
                ++stats_.dropped_stale;
                return false;
            }
            it->second = f.seq;
            ++stats_.delivered;
        }
        queues_[static_cast<int>(f.device_kind)].push(f);
        {
            std::lock_guard<std::mutex> lock(mu_);
            ++epoch_;
        }
        any_cv_.notify_all();
        return true;
    }

    // Blocks until any frame has been routed since the given epoch (or the
    // timeout passes); returns the epoch to wait against next time.
    std::uint64_t wait_any(std::uint64_t seen_epoch, int timeout_ms) {
        std::unique_lock<std::mutex> lock(mu_);
        any_cv_.wait_for(lock, std::chrono::milliseconds(timeout_ms),
                         [&] { return epoch_ != seen_epoch; });
        return epoch_;
    }

    void count_decode_error() {
        std::lock_guard<std::mutex> lock(mu_);
        ++stats_.decode_errors;
    }

    RouterStats stats() const {
        std::lock_guard<std::mutex> lock(mu_);
        return stats_;
    }

private:
    mutable std::mutex mu_;
    std::condition_variable any_cv_;
    std::uint64_t epoch_ = 0;
    std::map<std::uint32_t, std::uint32_t> last_seq_;
    RouterStats stats_;
    FrameQueue queues_[3];
};

// Receives datagrams on a bound socket and feeds the router until stopped.
// Decode errors are counted, never fatal.
class IngestServer {
public:
    IngestServer(UdpSocket socket, SessionRouter& router)
        : socket_(std::move(socket)), router_(router) {}

    ~IngestServer() { stop(); }

    void start() {
        running_ = true;
        thread_ = std::thread([this] { run(); });
    }

    void stop() {
        running_ = false;
        if (thread_.joinable()) thread_.join();
    }

    std::uint16_t port() const { return socket_.local_port(); }

private:
    void run() {
        std::uint8_t buf[512];
        while (running_) {
            const ssize_t n = socket_.recv(buf, 50);
            if (n <= 0) continue;
            SensorFrame f;
            const WireError err = decode_frame({buf, static_cast<std::size_t>(n)}, f);
            if (err != WireError::ok) {
                router_.count_decode_error();
                continue;
            }
            router_.route(f);
        }
    }

    UdpSocket socket_;
    SessionRouter& router_;
    std::atomic<bool> running_{false};
    std::thread thread_;
};

struct SubscriberStats {
    std::string label;
    std::uint64_t sent = 0;
    std::uint64_t errors = 0;
};

// Fans a pose message out to every subscriber; a failing subscriber never
// affects the others.
class PosePublisher {
public:
    void add_subscriber(const Endpoint& ep) {
        Subscriber s;
        s.socket = UdpSocket::connected(ep);
        s.stats.label = ep.host + ":" + std::to_string(ep.port);
        subscribers_.push_back(std::move(s));
    }

    std::size_t subscriber_count() const { return subscribers_.size(); }

    void publish(const PoseMessage& msg) {
        if (subscribers_.empty()) return;
        const auto bytes = encode_pose(msg);
        for (auto& sub : subscribers_) {
            if (sub.socket.send(bytes)) {
                ++sub.stats.sent;
            } else {
                ++sub.stats.errors;
                if (sub.stats.errors <= 3)
                    log::warn("pose send to ", sub.stats.label, " failed: ",
                              std::strerror(errno));
            }
        }
    }

    std::vector<SubscriberStats> stats() const {
        std::vector<SubscriberStats> out;
        out.reserve(subscribers_.size());
        for (const auto& sub : subscribers_) out.push_back(sub.stats);
        return out;
    }

private:
    struct Subscriber {
        UdpSocket socket;
        SubscriberStats stats;
    };
    std::vector<Subscriber> subscribers_;
};

} // namespace wearmocap::wire
