#pragma once

// Virtual watch/phone devices: ground-truth arm trajectories and physically
// consistent sensor synthesis, streamed over the wire protocol or written
// to CSV recordings.
//
// Arm model: shoulder orientation sampled inside a 110 deg cone around the
// rest pose, elbow treated as a hinge with flexion in [0, 150] deg about
// the local -Y axis, so q_la = q_ua * hinge(flex). Arm keyposes are defined
// relative to the hip frame and ride on the hip yaw. Trajectories start
// with a 1.5 s rest hold (the calibration posture).

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <charconv>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "wearmocap/errors.hpp"
#include "wearmocap/geometry.hpp"
#include "wearmocap/log.hpp"
#include "wearmocap/wire.hpp"

namespace wearmocap::sim {

enum class YawProfile { Fixed, Ramp, RandomWalk };

inline YawProfile yaw_profile_from_string(const std::string& s) {
    if (s == "fixed") return YawProfile::Fixed;
    if (s == "ramp") return YawProfile::Ramp;
    if (s == "walk" || s == "random-walk" || s == "random_walk") return YawProfile::RandomWalk;
    throw ValidationError("unknown yaw profile '" + s + "'");
}

struct TrajectorySpec {
    std::uint64_t seed = 1;
    double duration_s = 20.0;
    double rate_hz = 60.0;
    int keypose_count = 6;
    double max_joint_vel = 10.0;  // rad/s cap on world-frame segment rates
    YawProfile yaw_profile = YawProfile::Fixed;

    void validate() const {
        if (!(duration_s > 0.0)) throw ValidationError("duration must be positive");
        if (!(rate_hz > 0.0)) throw ValidationError("rate must be positive");
        if (keypose_count < 1) throw ValidationError("need at least one keypose");
        if (!(max_joint_vel > 0.0)) throw ValidationError("velocity cap must be positive");
    }
};

struct NoiseConfig {
    double gyro_std = 0.01;      // rad/s
    double accel_std = 0.05;     // m/s^2
    double orient_std = 0.005;   // rad
    double pressure_std = 0.05;  // hPa
    Quaternion watch_mount = Quaternion::identity();        // sensor -> segment
    Quaternion phone_ua_mount = Quaternion::identity();
    Quaternion phone_pocket_mount = Quaternion::identity();
    double sea_level_hpa = 1013.25;
    std::uint64_t seed = 7;

    static NoiseConfig zero() {
        NoiseConfig n;
        n.gyro_std = n.accel_std = n.orient_std = n.pressure_std = 0.0;
        return n;
    }
};

struct GroundTruthFrame {
    std::uint64_t timestamp_us = 0;
    Quaternion q_la, q_ua, q_hi;
    JointPositions joints;
};

inline constexpr double kRestHoldSeconds = 1.5;
inline constexpr double kShoulderRomRad = 110.0 * kPi / 180.0;
inline constexpr Vec3 kPocketOffset{0.0, 0.12, -0.05};  // in the hip frame

namespace detail {

inline double smoothstep(double u) { return u * u * (3.0 - 2.0 * u); }

struct Keypose {
    Quaternion q_ua_rel;
    double flex = 0.0;
    double time = 0.0;
};

inline Vec3 random_axis(std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vec3 v{gauss(rng), gauss(rng), gauss(rng)};
    while (v.norm() < 1e-9) v = {gauss(rng), gauss(rng), gauss(rng)};
    return v.normalized();
}

} // namespace detail

// Deterministic per seed. Throws TrajectoryError when the velocity cap is
// too low for the sampled keyposes (names the violating segment).
inline std::vector<GroundTruthFrame> gen_trajectory(const TrajectorySpec& spec,
                                                    const BodyMeasurements& body = {}) {
    spec.validate();
    body.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    // Knot list: rest at t=0, rest again at the end of the hold, then the
    // sampled keyposes spread evenly across the remaining time.
    const double hold =
        spec.keypose_count > 1 ? std::min(kRestHoldSeconds, 0.4 * spec.duration_s) : 0.0;
    std::vector<detail::Keypose> knots;
    knots.push_back({Quaternion::identity(), 0.0, 0.0});
    if (spec.keypose_count > 1) {
        knots.push_back({Quaternion::identity(), 0.0, hold});
        const int moving = spec.keypose_count - 1;
        for (int i = 1; i <= moving; ++i) {
            detail::Keypose kp;
            kp.q_ua_rel =
                Quaternion::from_axis_angle(detail::random_axis(rng), u01(rng) * kShoulderRomRad);
            kp.flex = u01(rng) * kElbowMaxRad;
            kp.time = hold + (spec.duration_s - hold) * static_cast<double>(i) /
                                 static_cast<double>(moving);
            knots.push_back(kp);
        }
    }

    // Hip yaw knots (same smoothstep interpolation as the arm).
    std::vector<std::pair<double, double>> yaw_knots;  // (time, yaw)
    switch (spec.yaw_profile) {
        case YawProfile::Fixed:
            yaw_knots = {{0.0, 0.0}, {spec.duration_s, 0.0}};
            break;
        case YawProfile::Ramp:
            // The 90 deg turn happens across the middle fifth.
            yaw_knots = {{0.0, 0.0},
                         {0.4 * spec.duration_s, 0.0},
                         {0.6 * spec.duration_s, kPi / 2},
                         {spec.duration_s, kPi / 2}};
            break;
        case YawProfile::RandomWalk: {
            // The body holds still through the calibration rest hold, then
            // wanders in 0.5 s steps.
            std::normal_distribution<double> step(0.0, 0.25);
            double yaw = 0.0, t = hold;
            yaw_knots.emplace_back(0.0, 0.0);
            if (hold > 0.0) yaw_knots.emplace_back(hold, 0.0);
            while (t < spec.duration_s) {
                t = std::min(spec.duration_s, t + 0.5);
                yaw += step(rng);
                yaw_knots.emplace_back(t, yaw);
            }
            break;
        }
    }

    double max_yaw_rate = 0.0;
    for (std::size_t i = 0; i + 1 < yaw_knots.size(); ++i) {
        const double dt = yaw_knots[i + 1].first - yaw_knots[i].first;
        if (dt <= 0.0) continue;
        max_yaw_rate = std::max(
            max_yaw_rate, 1.5 * std::abs(yaw_knots[i + 1].second - yaw_knots[i].second) / dt);
    }

    // Conservative feasibility: peak smoothstep rate is 1.5 * delta / dt,
    // and world-frame lower-arm motion is bounded by shoulder + elbow + yaw.
    for (std::size_t i = 0; i + 1 < knots.size(); ++i) {
        const double dt = knots[i + 1].time - knots[i].time;
        if (dt <= 0.0) continue;
        const double d_ua = geodesic_angle(knots[i].q_ua_rel, knots[i + 1].q_ua_rel);
        const double d_flex = std::abs(knots[i + 1].flex - knots[i].flex);
        const double need = 1.5 * (d_ua + d_flex) / dt + max_yaw_rate;
        if (need > spec.max_joint_vel)
            throw TrajectoryError("velocity cap " + std::to_string(spec.max_joint_vel) +
                                  " rad/s infeasible for keypose segment " + std::to_string(i) +
                                  " (requires " + std::to_string(need) + ")");
    }

    auto interp_yaw = [&](double t) {
        for (std::size_t i = 0; i + 1 < yaw_knots.size(); ++i) {
            if (t <= yaw_knots[i + 1].first) {
                const double span = yaw_knots[i + 1].first - yaw_knots[i].first;
                const double s =
                    span > 0.0 ? detail::smoothstep((t - yaw_knots[i].first) / span) : 1.0;
                return yaw_knots[i].second +
                       s * (yaw_knots[i + 1].second - yaw_knots[i].second);
            }
        }
        return yaw_knots.back().second;
    };

    const std::size_t frames =
        static_cast<std::size_t>(std::llround(spec.duration_s * spec.rate_hz));
    std::vector<GroundTruthFrame> out;
    out.reserve(frames);
    std::size_t knot = 0;
    for (std::size_t k = 0; k < frames; ++k) {
        const double t = static_cast<double>(k) / spec.rate_hz;
        while (knot + 2 < knots.size() && t > knots[knot + 1].time) ++knot;

        Quaternion q_rel = knots[knot].q_ua_rel;
        double flex = knots[knot].flex;
        if (knot + 1 < knots.size()) {
            const double span = knots[knot + 1].time - knots[knot].time;
            const double s = span > 0.0
                                 ? detail::smoothstep(std::clamp((t - knots[knot].time) / span,
                                                                 0.0, 1.0))
                                 : 1.0;
            q_rel = slerp(knots[knot].q_ua_rel, knots[knot + 1].q_ua_rel, s);
            flex = knots[knot].flex + s * (knots[knot + 1].flex - knots[knot].flex);
        }

        GroundTruthFrame f;
        f.timestamp_us = static_cast<std::uint64_t>(std::llround(t * 1e6));
        f.q_hi = yaw_quat(interp_yaw(t));
        f.q_ua = (f.q_hi * q_rel).normalized();
        f.q_la = (f.q_ua * elbow_hinge(flex)).normalized();
        f.joints = forward_kinematics(f.q_ua, f.q_la, f.q_hi, body);
        out.push_back(f);
    }
    return out;
}

struct DeviceStreams {
    std::vector<wire::SensorFrame> watch;
    std::vector<wire::SensorFrame> phone_upper;
    std::vector<wire::SensorFrame> phone_pocket;
};

inline constexpr std::uint32_t kWatchDeviceId = 1;
inline constexpr std::uint32_t kPhoneUpperDeviceId = 2;
inline constexpr std::uint32_t kPhonePocketDeviceId = 3;

// Sensor synthesis: orientation is the mounted segment orientation plus
// axis-angle noise; gyro is the central finite difference of the clean
// mounted orientation in the sensor frame; accel is the second central
// difference of the mount point plus gravity, rotated into the sensor
// frame; watch pressure follows the isothermal barometric formula at the
// wrist height.
inline DeviceStreams synth_sensors(const std::vector<GroundTruthFrame>& truth,
                                   const NoiseConfig& noise, const BodyMeasurements& body = {}) {
    if (truth.size() < 3)
        throw ValidationError("cannot differentiate sensor signals from fewer than 3 frames");
    body.validate();

    const std::size_t n = truth.size();
    const double dt = (static_cast<double>(truth[1].timestamp_us - truth[0].timestamp_us)) * 1e-6;

    struct DeviceDef {
        wire::DeviceKind kind;
        std::uint32_t id;
        Quaternion mount;
        bool pressure;
    };
    const DeviceDef devices[3] = {
        {wire::DeviceKind::Watch, kWatchDeviceId, noise.watch_mount, true},
        {wire::DeviceKind::PhoneUpperArm, kPhoneUpperDeviceId, noise.phone_ua_mount, false},
        {wire::DeviceKind::PhonePocket, kPhonePocketDeviceId, noise.phone_pocket_mount, false},
    };

    std::mt19937_64 rng(noise.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    DeviceStreams out;
    for (const auto& dev : devices) {
        // Clean mounted orientations and mount-point world positions.
        std::vector<Quaternion> q_dev(n);
        std::vector<Vec3> pos(n);
        for (std::size_t k = 0; k < n; ++k) {
            const auto& f = truth[k];
            switch (dev.kind) {
                case wire::DeviceKind::Watch:
                    q_dev[k] = (f.q_la * dev.mount).normalized();
                    pos[k] = f.joints.wrist;
                    break;
                case wire::DeviceKind::PhoneUpperArm:
                    q_dev[k] = (f.q_ua * dev.mount).normalized();
                    pos[k] = (f.joints.shoulder + f.joints.elbow) * 0.5;
                    break;
                case wire::DeviceKind::PhonePocket:
                    q_dev[k] = (f.q_hi * dev.mount).normalized();
                    pos[k] = rotate(f.q_hi, kPocketOffset);
                    break;
            }
        }

        std::vector<wire::SensorFrame> frames(n);
        for (std::size_t k = 0; k < n; ++k) {
            const std::size_t kc = std::min(std::max<std::size_t>(k, 1), n - 2);
            // Body-frame angular velocity over two frames.
            const Vec3 gyro_clean =
                (q_dev[kc - 1].inverse() * q_dev[kc + 1]).log_map() * (1.0 / (2.0 * dt));
            const Vec3 accel_world =
                (pos[kc + 1] - pos[kc] * 2.0 + pos[kc - 1]) * (1.0 / (dt * dt));
            const Vec3 accel_clean =
                rotate(q_dev[k].inverse(), accel_world + Vec3{0.0, 0.0, -kGravity});

            wire::SensorFrame& s = frames[k];
            s.device_kind = dev.kind;
            s.device_id = dev.id;
            s.seq = static_cast<std::uint32_t>(k + 1);
            s.timestamp_us = truth[k].timestamp_us;
            s.gyro = gyro_clean;
            s.accel = accel_clean;
            s.orientation = q_dev[k];
            if (noise.orient_std > 0.0)
                s.orientation =
                    (Quaternion::from_axis_angle(detail::random_axis(rng),
                                                 noise.orient_std * gauss(rng)) *
                     s.orientation)
                        .normalized();
            if (noise.gyro_std > 0.0)
                s.gyro += Vec3{noise.gyro_std * gauss(rng), noise.gyro_std * gauss(rng),
                               noise.gyro_std * gauss(rng)};
            if (noise.accel_std > 0.0)
                s.accel += Vec3{noise.accel_std * gauss(rng), noise.accel_std * gauss(rng),
                                noise.accel_std * gauss(rng)};
            if (dev.pressure) {
                double p = noise.sea_level_hpa *
                           std::exp(-truth[k].joints.wrist.z / kBarometricScaleHeight);
                if (noise.pressure_std > 0.0) p += noise.pressure_std * gauss(rng);
                s.pressure_hpa = p;
            }
        }
        switch (dev.kind) {
            case wire::DeviceKind::Watch: out.watch = std::move(frames); break;
            case wire::DeviceKind::PhoneUpperArm: out.phone_upper = std::move(frames); break;
            case wire::DeviceKind::PhonePocket: out.phone_pocket = std::move(frames); break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Streaming
// ---------------------------------------------------------------------------

struct StreamOptions {
    bool realtime = false;
    double loss_rate = 0.0;  // injected packet loss, [0, 1)
    std::uint64_t loss_seed = 99;
};

struct StreamReport {
    std::size_t sent = 0;
    std::size_t dropped = 0;  // loss injection
    std::size_t send_errors = 0;
};

// Sends the given per-device frame sequences merged by timestamp. Realtime
// mode paces sends to the frame timestamps; otherwise full speed.
inline StreamReport stream(const std::vector<const std::vector<wire::SensorFrame>*>& streams,
                           const wire::Endpoint& target, const StreamOptions& opts = {}) {
    wire::UdpSocket sock = wire::UdpSocket::connected(target);
    std::mt19937_64 rng(opts.loss_seed);
    std::bernoulli_distribution lose(opts.loss_rate);

    std::vector<std::size_t> idx(streams.size(), 0);
    const auto start = std::chrono::steady_clock::now();
    StreamReport report;

    for (;;) {
        int pick = -1;
        std::uint64_t best_ts = 0;
        for (std::size_t s = 0; s < streams.size(); ++s) {
            if (idx[s] >= streams[s]->size()) continue;
            const std::uint64_t ts = (*streams[s])[idx[s]].timestamp_us;
            if (pick < 0 || ts < best_ts) {
                pick = static_cast<int>(s);
                best_ts = ts;
            }
        }
        if (pick < 0) break;
        const wire::SensorFrame& f = (*streams[static_cast<std::size_t>(pick)])
            [idx[static_cast<std::size_t>(pick)]++];

        if (opts.realtime)
            std::this_thread::sleep_until(start + std::chrono::microseconds(f.timestamp_us));

        if (opts.loss_rate > 0.0 && lose(rng)) {
            ++report.dropped;
            continue;
        }
        if (sock.send(wire::encode_frame(f))) {
            ++report.sent;
        } else {
            ++report.send_errors;
            if (report.send_errors <= 3)
                log::warn("stream send failed: ", std::strerror(errno));
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// CSV recordings: one row per time step with all three device streams and
// the ground truth. Values are printed with 9 significant digits.
// ---------------------------------------------------------------------------

struct Recording {
    std::vector<GroundTruthFrame> truth;
    DeviceStreams sensors;
};

inline const std::vector<std::string>& recording_columns() {
    static const std::vector<std::string> cols = {
        "t_us",
        "w_ax", "w_ay", "w_az", "w_gx", "w_gy", "w_gz",
        "w_qw", "w_qx", "w_qy", "w_qz", "w_press",
        "ua_ax", "ua_ay", "ua_az", "ua_gx", "ua_gy", "ua_gz",
        "ua_qw", "ua_qx", "ua_qy", "ua_qz",
        "pk_ax", "pk_ay", "pk_az", "pk_gx", "pk_gy", "pk_gz",
        "pk_qw", "pk_qx", "pk_qy", "pk_qz",
        "gt_la_w", "gt_la_x", "gt_la_y", "gt_la_z",
        "gt_ua_w", "gt_ua_x", "gt_ua_y", "gt_ua_z",
        "gt_hi_w", "gt_hi_x", "gt_hi_y", "gt_hi_z",
        "gt_sx", "gt_sy", "gt_sz",
        "gt_ex", "gt_ey", "gt_ez",
        "gt_wx", "gt_wy", "gt_wz",
    };
    return cols;
}

inline void write_recording(const Recording& rec, const std::string& path) {
    const std::size_t n = rec.truth.size();
    if (rec.sensors.watch.size() != n || rec.sensors.phone_upper.size() != n ||
        rec.sensors.phone_pocket.size() != n)
        throw ValidationError("recording streams must be aligned with the ground truth");

    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ParseError("cannot open recording for write: " + path);

    const auto& cols = recording_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) f << (i ? "," : "") << cols[i];
    f << '\n';

    char buf[32];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.9g", v);
        f << ',' << buf;
    };
    auto vec3 = [&](const Vec3& v) { num(v.x); num(v.y); num(v.z); };
    auto quat = [&](const Quaternion& q) { num(q.w); num(q.x); num(q.y); num(q.z); };

    for (std::size_t k = 0; k < n; ++k) {
        f << rec.truth[k].timestamp_us;
        const auto& w = rec.sensors.watch[k];
        vec3(w.accel); vec3(w.gyro); quat(w.orientation);
        num(w.pressure_hpa.value_or(0.0));
        const auto& ua = rec.sensors.phone_upper[k];
        vec3(ua.accel); vec3(ua.gyro); quat(ua.orientation);
        const auto& pk = rec.sensors.phone_pocket[k];
        vec3(pk.accel); vec3(pk.gyro); quat(pk.orientation);
        const auto& t = rec.truth[k];
        quat(t.q_la); quat(t.q_ua); quat(t.q_hi);
        vec3(t.joints.shoulder); vec3(t.joints.elbow); vec3(t.joints.wrist);
        f << '\n';
    }
    if (!f) throw ParseError("short write to recording: " + path);
}

inline Recording read_recording(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open recording: " + path);

    std::string line;
    if (!std::getline(f, line)) throw ParseError("empty recording: " + path, 1);

    // Header must carry every expected column, in order.
    {
        std::vector<std::string> header;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
        const auto& cols = recording_columns();
        for (std::size_t i = 0; i < cols.size(); ++i) {
            if (i >= header.size() || header[i] != cols[i])
                throw ParseError("missing or misplaced column '" + cols[i] + "' in " + path, 1);
        }
        if (header.size() != cols.size())
            throw ParseError("unexpected extra columns in " + path, 1);
    }

    Recording rec;
    std::size_t line_no = 1;
    std::vector<double> vals(recording_columns().size());
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        const char* p = line.data();
        const char* end = line.data() + line.size();
        for (std::size_t c = 0; c < vals.size(); ++c) {
            if (c > 0) {
                if (p >= end || *p != ',')
                    throw ParseError("expected " + std::to_string(vals.size()) +
                                         " columns in " + path,
                                     line_no);
                ++p;
            }
            auto [next, ec] = std::from_chars(p, end, vals[c]);
            if (ec != std::errc())
                throw ParseError("bad number in column " + recording_columns()[c] + " of " +
                                     path,
                                 line_no);
            p = next;
        }
        if (p != end) throw ParseError("trailing characters in " + path, line_no);

        const std::uint32_t seq = static_cast<std::uint32_t>(rec.truth.size() + 1);
        const std::uint64_t ts = static_cast<std::uint64_t>(vals[0]);
        std::size_t c = 1;
        auto vec3 = [&]() {
            Vec3 v{vals[c], vals[c + 1], vals[c + 2]};
            c += 3;
            return v;
        };
        auto quat = [&]() {
            Quaternion q{vals[c], vals[c + 1], vals[c + 2], vals[c + 3]};
            c += 4;
            return q;
        };

        wire::SensorFrame w;
        w.device_kind = wire::DeviceKind::Watch;
        w.device_id = kWatchDeviceId;
        w.seq = seq;
        w.timestamp_us = ts;
        w.accel = vec3();
        w.gyro = vec3();
        w.orientation = quat();
        w.pressure_hpa = vals[c++];

        wire::SensorFrame ua;
        ua.device_kind = wire::DeviceKind::PhoneUpperArm;
        ua.device_id = kPhoneUpperDeviceId;
        ua.seq = seq;
        ua.timestamp_us = ts;
        ua.accel = vec3();
        ua.gyro = vec3();
        ua.orientation = quat();

        wire::SensorFrame pk;
        pk.device_kind = wire::DeviceKind::PhonePocket;
        pk.device_id = kPhonePocketDeviceId;
        pk.seq = seq;
        pk.timestamp_us = ts;
        pk.accel = vec3();
        pk.gyro = vec3();
        pk.orientation = quat();

        GroundTruthFrame t;
        t.timestamp_us = ts;
        t.q_la = quat();
        t.q_ua = quat();
        t.q_hi = quat();
        t.joints.shoulder = vec3();
        t.joints.elbow = vec3();
        t.joints.wrist = vec3();

        rec.sensors.watch.push_back(w);
        rec.sensors.phone_upper.push_back(ua);
        rec.sensors.phone_pocket.push_back(pk);
        rec.truth.push_back(t);
    }
    if (rec.truth.empty()) throw ParseError("recording has no data rows: " + path, line_no);
    return rec;
}

} // namespace wearmocap::sim
