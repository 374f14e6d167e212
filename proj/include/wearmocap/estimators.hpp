#pragma once

// The three tracking pipelines: frame pairing, calibration, feature
// extraction, model invocation and pose assembly.
//
// Calibration conventions: a device reports q_dev (sensor frame -> device
// world). With mount = heading * mean(q_dev) captured in the ArmDown
// posture, the calibrated segment orientation is
//     q_seg = heading * q_dev * mount^-1,
// which is the identity while the user holds the posture. heading is the
// yaw that aligns the device world with the calibrated world (X = the
// user's forward at calibration time); it assumes the watch is worn with
// no yaw component in its mounting.

#include <array>
#include <atomic>
#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wearmocap/enkf.hpp"
#include "wearmocap/errors.hpp"
#include "wearmocap/geometry.hpp"
#include "wearmocap/log.hpp"
#include "wearmocap/lstm.hpp"
#include "wearmocap/wire.hpp"

namespace wearmocap::est {

inline constexpr int kWatchChannels = 14;
inline constexpr int kUpperArmChannels = 24;
inline constexpr int kPocketObsChannels = 9;
inline constexpr int kPoseOutputs = 8;  // q_la (4) + q_ua (4)

struct ArmPose {
    std::uint64_t timestamp_us = 0;
    wire::TrackingMode mode = wire::TrackingMode::WatchOnly;
    Quaternion q_la, q_ua;
    std::optional<Quaternion> q_hi;
    JointPositions joints;
    double conf_la = 0.0, conf_ua = 0.0, conf_hi = 0.0;

    wire::PoseMessage to_message() const {
        wire::PoseMessage m;
        m.timestamp_us = timestamp_us;
        m.mode = mode;
        m.q_la = q_la;
        m.q_ua = q_ua;
        m.q_hi = q_hi;
        m.shoulder = joints.shoulder;
        m.elbow = joints.elbow;
        m.wrist = joints.wrist;
        return m;
    }
};

enum class Posture { ArmDown };

struct CalibrationOffsets {
    Quaternion heading = Quaternion::identity();  // device world -> calibrated world
    std::array<std::optional<Quaternion>, 3> mounts;  // per DeviceKind, sensor -> segment
    double ref_pressure_hpa = 1013.25;
    double ref_wrist_height_m = 0.0;

    const Quaternion& mount(wire::DeviceKind kind) const {
        const auto& m = mounts[static_cast<std::size_t>(kind)];
        if (!m) throw ValidationError("no calibration for device kind " +
                                      std::to_string(static_cast<int>(kind)));
        return *m;
    }
    void set_mount(wire::DeviceKind kind, const Quaternion& q) {
        mounts[static_cast<std::size_t>(kind)] = q;
    }
};

namespace detail {

inline Quaternion mean_orientation(const std::vector<wire::SensorFrame>& frames,
                                   double* spread_deg_out) {
    Quaternion sum{0, 0, 0, 0};
    const Quaternion ref = frames.front().orientation;
    for (const auto& f : frames) {
        Quaternion q = f.orientation;
        if (q.dot(ref) < 0.0) q = -q;
        sum = {sum.w + q.w, sum.x + q.x, sum.y + q.y, sum.z + q.z};
    }
    const Quaternion mean = sum.normalized();
    double spread = 0.0;
    for (const auto& f : frames)
        spread = std::max(spread, geodesic_angle(mean, f.orientation));
    if (spread_deg_out) *spread_deg_out = spread * 180.0 / kPi;
    return mean;
}

} // namespace detail

// Mounting offsets, heading, reference pressure and rest wrist height from
// a posture-hold capture. Raises CalibrationError when any device's
// orientation spread exceeds max_spread_deg during the capture.
inline CalibrationOffsets calibrate(
    const std::map<wire::DeviceKind, std::vector<wire::SensorFrame>>& captures,
    Posture posture, const BodyMeasurements& body = {}, double max_spread_deg = 10.0) {
    (void)posture;  // ArmDown is the only posture; its segment orientations are identity
    body.validate();
    const auto watch_it = captures.find(wire::DeviceKind::Watch);
    if (watch_it == captures.end() || watch_it->second.empty())
        throw ValidationError("calibration requires watch frames");

    // Heading first: yaw of the watch mean orientation.
    double watch_spread = 0.0;
    const Quaternion watch_mean = detail::mean_orientation(watch_it->second, &watch_spread);
    CalibrationOffsets out;
    try {
        out.heading = yaw_quat(-yaw_of(watch_mean));
    } catch (const UndefinedYawError&) {
        log::warn("watch forward axis is vertical at calibration; assuming zero heading");
        out.heading = Quaternion::identity();
    }

    for (const auto& [kind, frames] : captures) {
        if (frames.empty()) throw ValidationError("empty calibration capture for a device");
        double spread_deg = 0.0;
        const Quaternion mean = detail::mean_orientation(frames, &spread_deg);
        if (spread_deg > max_spread_deg)
            throw CalibrationError("orientation spread " + std::to_string(spread_deg) +
                                       " deg exceeds " + std::to_string(max_spread_deg) +
                                       " deg during calibration",
                                   spread_deg);
        out.set_mount(kind, (out.heading * mean).normalized());
    }

    double pressure_sum = 0.0;
    std::size_t pressure_n = 0;
    for (const auto& f : watch_it->second) {
        if (!f.pressure_hpa) throw ValidationError("watch calibration frame lacks pressure");
        pressure_sum += *f.pressure_hpa;
        ++pressure_n;
    }
    out.ref_pressure_hpa = pressure_sum / static_cast<double>(pressure_n);
    out.ref_wrist_height_m =
        forward_kinematics(Quaternion::identity(), Quaternion::identity(),
                           Quaternion::identity(), body)
            .wrist.z;
    return out;
}

// Calibrated segment orientation of a device sample, canonical hemisphere.
inline Quaternion segment_orientation(const Quaternion& device_orientation,
                                      const CalibrationOffsets& calib, wire::DeviceKind kind) {
    return (calib.heading * device_orientation * calib.mount(kind).inverse())
        .normalized()
        .canonical();
}

// Height above the calibration wrist height implied by a pressure reading.
inline double pressure_height_delta(double pressure_hpa, const CalibrationOffsets& calib) {
    return -kBarometricScaleHeight * std::log(pressure_hpa / calib.ref_pressure_hpa);
}

// ---------------------------------------------------------------------------
// Calibration file: "key,value" lines.
// ---------------------------------------------------------------------------

inline void save_calibration(const CalibrationOffsets& calib, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ParseError("cannot open calibration file for write: " + path);
    f.precision(17);
    auto quat = [&](const std::string& name, const Quaternion& q) {
        f << name << "_w," << q.w << '\n'
          << name << "_x," << q.x << '\n'
          << name << "_y," << q.y << '\n'
          << name << "_z," << q.z << '\n';
    };
    quat("heading", calib.heading);
    static const char* names[3] = {"mount_watch", "mount_phone_ua", "mount_phone_pocket"};
    for (int k = 0; k < 3; ++k)
        if (calib.mounts[static_cast<std::size_t>(k)])
            quat(names[k], *calib.mounts[static_cast<std::size_t>(k)]);
    f << "ref_pressure_hpa," << calib.ref_pressure_hpa << '\n';
    f << "ref_wrist_height_m," << calib.ref_wrist_height_m << '\n';
}

inline CalibrationOffsets load_calibration(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open calibration file: " + path);
    std::map<std::string, double> kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw ParseError("expected key,value in " + path, line_no);
        try {
            kv[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
        } catch (const std::exception&) {
            throw ParseError("bad value in " + path, line_no);
        }
    }
    CalibrationOffsets out;
    auto quat = [&](const std::string& name, Quaternion& q) {
        const std::array<std::string, 4> keys = {name + "_w", name + "_x", name + "_y",
                                                 name + "_z"};
        if (!kv.count(keys[0])) return false;
        for (const auto& k : keys)
            if (!kv.count(k)) throw ParseError("missing key " + k + " in " + path);
        q = Quaternion{kv[keys[0]], kv[keys[1]], kv[keys[2]], kv[keys[3]]}.normalized();
        return true;
    };
    quat("heading", out.heading);
    static const char* names[3] = {"mount_watch", "mount_phone_ua", "mount_phone_pocket"};
    for (int k = 0; k < 3; ++k) {
        Quaternion q;
        if (quat(names[k], q)) out.mounts[static_cast<std::size_t>(k)] = q;
    }
    if (kv.count("ref_pressure_hpa")) out.ref_pressure_hpa = kv["ref_pressure_hpa"];
    if (kv.count("ref_wrist_height_m")) out.ref_wrist_height_m = kv["ref_wrist_height_m"];
    return out;
}

// ---------------------------------------------------------------------------
// Frame pairing
// ---------------------------------------------------------------------------

struct PairStats {
    std::size_t paired = 0;
    std::size_t dropped_watch = 0;
};

// Batch nearest-timestamp pairing over ordered sequences. Phone frames are
// consumed monotonically and never pair twice; watch frames without a
// partner inside the tolerance are dropped (counted).
inline std::vector<std::pair<wire::SensorFrame, wire::SensorFrame>> pair_frames(
    const std::vector<wire::SensorFrame>& watch, const std::vector<wire::SensorFrame>& phone,
    double tolerance_ms = 50.0, PairStats* stats = nullptr) {
    std::vector<std::pair<wire::SensorFrame, wire::SensorFrame>> out;
    const double tol_us = tolerance_ms * 1000.0;
    std::size_t j = 0;
    PairStats local;
    for (const auto& w : watch) {
        auto dist = [&](std::size_t idx) {
            return std::abs(static_cast<double>(phone[idx].timestamp_us) -
                            static_cast<double>(w.timestamp_us));
        };
        while (j + 1 < phone.size() && dist(j + 1) <= dist(j)) ++j;
        if (j < phone.size() && dist(j) <= tol_us) {
            out.emplace_back(w, phone[j]);
            ++j;
            ++local.paired;
        } else {
            ++local.dropped_watch;
        }
    }
    if (stats) *stats = local;
    return out;
}

// Streaming variant for the live hub: frames arrive incrementally; a watch
// frame is decided once a phone frame at or past its timestamp is seen (no
// later phone can be nearer), when the phone stream is clearly starved, or
// at flush. Unlike the batch policy, a watch frame whose only candidate is
// a future phone that sits nearer to the next watch frame is dropped
// instead of paired; otherwise a single lost phone datagram would shift
// the pairing permanently and cost a frame period of latency on every
// subsequent pose.
class FramePairer {
public:
    explicit FramePairer(double tolerance_ms = 50.0) : tol_us_(tolerance_ms * 1000.0) {}

    void push_watch(const wire::SensorFrame& f) {
        watch_.push_back(f);
        newest_watch_us_ = f.timestamp_us;
    }
    void push_phone(const wire::SensorFrame& f) { phone_.push_back(f); }

    std::vector<std::pair<wire::SensorFrame, wire::SensorFrame>> drain() { return decide(false); }
    std::vector<std::pair<wire::SensorFrame, wire::SensorFrame>> flush() { return decide(true); }

    std::size_t dropped_watch() const { return dropped_watch_; }

private:
    std::vector<std::pair<wire::SensorFrame, wire::SensorFrame>> decide(bool flushing) {
        std::vector<std::pair<wire::SensorFrame, wire::SensorFrame>> out;
        while (!watch_.empty()) {
            const wire::SensorFrame& w = watch_.front();
            auto dist = [&](const wire::SensorFrame& p) {
                return std::abs(static_cast<double>(p.timestamp_us) -
                                static_cast<double>(w.timestamp_us));
            };
            // Drop consumed-side phones that a later phone strictly beats.
            while (phone_.size() >= 2 && dist(phone_[1]) <= dist(phone_[0]))
                phone_.pop_front();

            const bool have_future =
                !phone_.empty() && phone_.back().timestamp_us >= w.timestamp_us;
            const bool starved =
                static_cast<double>(newest_watch_us_) - static_cast<double>(w.timestamp_us) >
                starve_horizon_us();
            if (!have_future && !flushing && !starved) break;  // a nearer phone may still come

            if (!phone_.empty() && dist(phone_.front()) <= tol_us_) {
                const wire::SensorFrame& p = phone_.front();
                const bool future = p.timestamp_us > w.timestamp_us;
                const bool next_watch_nearer =
                    watch_.size() >= 2 &&
                    std::abs(static_cast<double>(p.timestamp_us) -
                             static_cast<double>(watch_[1].timestamp_us)) < dist(p);
                if (future && next_watch_nearer) {
                    ++dropped_watch_;  // re-sync: the phone belongs to the next watch
                } else {
                    out.emplace_back(w, p);
                    phone_.pop_front();
                }
            } else {
                ++dropped_watch_;
            }
            watch_.pop_front();
        }
        return out;
    }

    double starve_horizon_us() const { return std::max(4.0 * tol_us_, 200000.0); }

    std::deque<wire::SensorFrame> watch_;
    std::deque<wire::SensorFrame> phone_;
    std::uint64_t newest_watch_us_ = 0;
    std::atomic<std::size_t> dropped_watch_{0};  // readable from a stats thread
    double tol_us_;
};

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

struct NormSpec {
    std::vector<double> mean;
    std::vector<double> std;

    void validate(std::size_t channels) const {
        if (mean.size() != channels || std.size() != channels)
            throw DimensionError("normalization constants do not match channel count");
        for (double s : std)
            if (!(s > 0.0)) throw ValidationError("normalization std must be positive");
    }
};

namespace detail {

inline void append_norm_group(NormSpec& n, int count, double std) {
    for (int i = 0; i < count; ++i) {
        n.mean.push_back(0.0);
        n.std.push_back(std);
    }
}

} // namespace detail

// Fixed per-channel-group scales; the models absorb the rest during
// training. Pressure scale: 0.12 hPa per meter of wrist height.
inline NormSpec default_norm(wire::TrackingMode mode) {
    NormSpec n;
    detail::append_norm_group(n, 4, 1.0);   // watch orientation
    detail::append_norm_group(n, 3, 2.0);   // watch gyro
    detail::append_norm_group(n, 3, 6.0);   // watch accel
    detail::append_norm_group(n, 3, 0.6);   // gravity direction
    detail::append_norm_group(n, 1, 0.12);  // pressure delta
    if (mode == wire::TrackingMode::UpperArm) {
        detail::append_norm_group(n, 4, 1.0);  // phone orientation
        detail::append_norm_group(n, 3, 2.0);  // phone gyro
        detail::append_norm_group(n, 3, 6.0);  // phone accel
    }
    return n;
}

struct EnkfParams {
    int ensemble_size = 128;
    double q_std_la = 0.02;  // rad per frame
    double q_std_ua = 0.012;
    double q_std_hi = 0.02;
    double r_quat = 0.02;    // quaternion observation channels
    double r_height = 0.06;  // meters, after barometer smoothing
    // Raw barometric height is ~0.4 m noisy at 0.05 hPa pressure noise;
    // the observation uses an exponential moving average of the pressure
    // delta. Smaller alpha = smoother but laggier.
    double height_ema_alpha = 0.15;
    double inflation = 1.0;  // > 1 enables per-step covariance inflation
    std::uint64_t seed = 1;
};

struct ModeConfig {
    wire::TrackingMode mode = wire::TrackingMode::WatchOnly;
    int window = 25;
    NormSpec norm;
    std::string weights_path;
    EnkfParams enkf;
    double pairing_tolerance_ms = 50.0;

    static ModeConfig defaults(wire::TrackingMode mode) {
        ModeConfig c;
        c.mode = mode;
        c.norm = default_norm(mode);
        return c;
    }

    int channels() const {
        return mode == wire::TrackingMode::UpperArm ? kUpperArmChannels : kWatchChannels;
    }
};

// Raw (un-normalized) 14 watch channels: calibrated orientation, gyro,
// accel, gravity direction in the sensor frame, pressure delta.
inline std::array<double, kWatchChannels> watch_features_raw(const wire::SensorFrame& watch,
                                                             const CalibrationOffsets& calib) {
    if (!watch.pressure_hpa)
        throw ValidationError("watch frame lacks pressure; invalid frame for features");
    const Quaternion seg = segment_orientation(watch.orientation, calib, wire::DeviceKind::Watch);
    const Vec3 gravity_dir = rotate(watch.orientation.inverse().normalized(), {0.0, 0.0, -1.0});
    return {seg.w, seg.x, seg.y, seg.z,
            watch.gyro.x, watch.gyro.y, watch.gyro.z,
            watch.accel.x, watch.accel.y, watch.accel.z,
            gravity_dir.x, gravity_dir.y, gravity_dir.z,
            *watch.pressure_hpa - calib.ref_pressure_hpa};
}

inline std::vector<double> extract_features(const wire::SensorFrame& watch,
                                            const wire::SensorFrame* phone,
                                            const CalibrationOffsets& calib,
                                            const ModeConfig& cfg) {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(cfg.channels()));
    for (double v : watch_features_raw(watch, calib)) out.push_back(v);
    if (cfg.mode == wire::TrackingMode::UpperArm) {
        if (!phone) throw ValidationError("upper-arm features need a phone frame");
        const Quaternion seg =
            segment_orientation(phone->orientation, calib, wire::DeviceKind::PhoneUpperArm);
        out.insert(out.end(), {seg.w, seg.x, seg.y, seg.z, phone->gyro.x, phone->gyro.y,
                               phone->gyro.z, phone->accel.x, phone->accel.y, phone->accel.z});
    }
    cfg.norm.validate(out.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = (out[i] - cfg.norm.mean[i]) / cfg.norm.std[i];
    return out;
}

// ---------------------------------------------------------------------------
// LSTM-mode estimators
// ---------------------------------------------------------------------------

namespace detail {

// Shared window-and-predict machinery for the two LSTM modes.
class WindowedLstm {
public:
    WindowedLstm(const ModeConfig& cfg, const CalibrationOffsets& calib,
                 const BodyMeasurements& body, lstm::LstmParams params)
        : cfg_(cfg), calib_(calib), body_(body), model_(params) {
        body_.validate();
        if (cfg_.window < 1) throw ValidationError("window length must be >= 1");
        if (params.cfg.input_size != cfg_.channels())
            throw DimensionError("model input width " + std::to_string(params.cfg.input_size) +
                                 " does not match the mode's " +
                                 std::to_string(cfg_.channels()) + " feature channels");
        if (params.cfg.output_size != kPoseOutputs)
            throw DimensionError("model output width must be 8 (two quaternions)");
        window_.reserve(static_cast<std::size_t>(cfg_.window * cfg_.channels()));
    }

    std::optional<ArmPose> step(const wire::SensorFrame& watch,
                                const wire::SensorFrame* phone) {
        const auto feats = extract_features(watch, phone, calib_, cfg_);
        const int width = cfg_.channels();
        if (window_.size() == static_cast<std::size_t>(cfg_.window * width))
            window_.erase(window_.begin(), window_.begin() + width);
        for (double v : feats) window_.push_back(static_cast<float>(v));
        if (window_.size() < static_cast<std::size_t>(cfg_.window * width))
            return std::nullopt;  // warming up

        const auto y = model_.forward(window_);
        const Quaternion raw_la{y[0], y[1], y[2], y[3]};
        const Quaternion raw_ua{y[4], y[5], y[6], y[7]};

        ArmPose pose;
        pose.timestamp_us = watch.timestamp_us;
        pose.mode = cfg_.mode;
        pose.q_la = raw_la.normalized().canonical();
        pose.q_ua = raw_ua.normalized().canonical();
        pose.joints = forward_kinematics(pose.q_ua, pose.q_la, Quaternion::identity(), body_);
        pose.conf_la = std::min(1.0, raw_la.norm());
        pose.conf_ua = std::min(1.0, raw_ua.norm());
        return pose;
    }

    void reset() { window_.clear(); }

private:
    ModeConfig cfg_;
    CalibrationOffsets calib_;
    BodyMeasurements body_;
    lstm::InferenceLstm model_;
    std::vector<float> window_;
};

} // namespace detail

// Watch Only: arm orientations from the watch alone; the body is assumed
// to keep facing the calibrated forward direction (q_hi = identity).
class WatchOnlyEstimator {
public:
    WatchOnlyEstimator(const ModeConfig& cfg, const CalibrationOffsets& calib,
                       const BodyMeasurements& body, lstm::LstmParams params)
        : impl_(cfg, calib, body, std::move(params)) {}

    std::optional<ArmPose> step(const wire::SensorFrame& watch) {
        return impl_.step(watch, nullptr);
    }
    void reset() { impl_.reset(); }

private:
    detail::WindowedLstm impl_;
};

// Upper Arm: watch + phone strapped to the upper arm; body rotation stays
// observable through the phone, so the user may turn freely.
class UpperArmEstimator {
public:
    UpperArmEstimator(const ModeConfig& cfg, const CalibrationOffsets& calib,
                      const BodyMeasurements& body, lstm::LstmParams params)
        : impl_(cfg, calib, body, std::move(params)) {}

    std::optional<ArmPose> step(const wire::SensorFrame& watch, const wire::SensorFrame& phone) {
        return impl_.step(watch, &phone);
    }
    void reset() { impl_.reset(); }

private:
    detail::WindowedLstm impl_;
};

// ---------------------------------------------------------------------------
// Pocket mode: ensemble Kalman filter over (q_la, q_ua, q_hi)
// ---------------------------------------------------------------------------

// State layout: q_la at 0, q_ua at 4, q_hi at 8.
// Observation layout: calibrated watch segment orientation (4), calibrated
// pocket segment orientation (4), pressure height delta (1).

// Elbow flexion angle of the relative rotation between the segments
// (twist about the hinge axis), clamped to the anatomical range. The
// filter prior allows a few degrees of hyperextension so rest poses do
// not pile up against the clamp.
inline constexpr double kFlexPriorMin = -0.12;                      // rad
inline constexpr double kFlexPriorMax = kElbowMaxRad + 0.09;   // rad

inline double elbow_flexion_of(const Quaternion& q_ua, const Quaternion& q_la) {
    const Quaternion rel = (q_ua.inverse() * q_la).normalized();
    // Twist component about (0,-1,0).
    const double s = -rel.y;
    const double w = rel.w >= 0.0 ? rel.w : -rel.w;
    const double sv = rel.w >= 0.0 ? s : -s;
    double flex = 2.0 * std::atan2(sv, w);
    return std::clamp(flex, kFlexPriorMin, kFlexPriorMax);
}

// Analytic pocket process model: the arm is a kinematic chain, so the
// upper arm is re-derived from the (well observed) lower arm through the
// elbow hinge, and the hip block is projected onto pure yaw. Process noise
// is added by the filter's predict step.
inline enkf::ProcessModel pocket_process_model() {
    return [](enkf::StateVec& s) {
        const Quaternion q_la{s[0], s[1], s[2], s[3]};
        const Quaternion q_ua{s[4], s[5], s[6], s[7]};
        const Quaternion q_hi{s[8], s[9], s[10], s[11]};

        const double flex = elbow_flexion_of(q_ua, q_la);
        const Quaternion ua = (q_la * elbow_hinge(flex).inverse()).normalized();
        s[4] = ua.w;
        s[5] = ua.x;
        s[6] = ua.y;
        s[7] = ua.z;

        try {
            const Quaternion hi = yaw_quat(yaw_of(q_hi.normalized()));
            s[8] = hi.w;
            s[9] = hi.x;
            s[10] = hi.y;
            s[11] = hi.z;
        } catch (const UndefinedYawError&) {
            // Keep the block; the next update pulls it back.
        }
    };
}

inline enkf::ObsModel pocket_obs_model(const BodyMeasurements& body, double ref_wrist_height) {
    return [body, ref_wrist_height](const enkf::StateVec& s) {
        const Quaternion q_la{s[0], s[1], s[2], s[3]};
        const Quaternion q_ua{s[4], s[5], s[6], s[7]};
        const Quaternion q_hi{s[8], s[9], s[10], s[11]};
        const auto joints = forward_kinematics(q_ua, q_la, q_hi, body);
        return enkf::ObsVec{s[0], s[1], s[2],  s[3], s[8], s[9], s[10], s[11],
                            joints.wrist.z - ref_wrist_height};
    };
}

class PocketEstimator {
public:
    enum class Status { ok, diverged_reinit };

    PocketEstimator(const ModeConfig& cfg, const CalibrationOffsets& calib,
                    const BodyMeasurements& body)
        : cfg_(cfg), calib_(calib), body_(body), rng_(cfg.enkf.seed) {
        body_.validate();
        if (cfg_.enkf.ensemble_size < 2)
            throw ValidationError("pocket mode needs an ensemble of at least 2");
        process_ = pocket_process_model();
        obs_model_ = pocket_obs_model(body_, calib_.ref_wrist_height_m);
        reinit();
    }

    ArmPose step(const wire::SensorFrame& watch, const wire::SensorFrame& phone) {
        const enkf::ObsVec obs = observation(watch, phone);

        enkf::predict(ens_, process_, rng_);
        track_divergence(obs);
        enkf::update(ens_, obs, obs_model_, rng_);
        if (cfg_.enkf.inflation > 1.0) enkf::inflate(ens_, cfg_.enkf.inflation);

        const auto mean = enkf::mean_state(ens_);
        const auto var = enkf::covariance_diag(ens_);

        ArmPose pose;
        pose.timestamp_us = watch.timestamp_us;
        pose.mode = wire::TrackingMode::Pocket;
        pose.q_la = Quaternion{mean[0], mean[1], mean[2], mean[3]}.normalized().canonical();
        pose.q_ua = Quaternion{mean[4], mean[5], mean[6], mean[7]}.normalized().canonical();
        Quaternion hi = Quaternion{mean[8], mean[9], mean[10], mean[11]}.normalized();
        try {
            hi = yaw_quat(yaw_of(hi));  // the hip state is yaw-only by contract
        } catch (const UndefinedYawError&) {
            hi = Quaternion::identity();
        }
        pose.q_hi = hi.canonical();
        pose.joints = forward_kinematics(pose.q_ua, pose.q_la, *pose.q_hi, body_);
        pose.conf_la = block_confidence(var, 0);
        pose.conf_ua = block_confidence(var, 4);
        pose.conf_hi = block_confidence(var, 8);
        return pose;
    }

    enkf::ObsVec observation(const wire::SensorFrame& watch, const wire::SensorFrame& phone) {
        if (!watch.pressure_hpa)
            throw ValidationError("watch frame lacks pressure; invalid frame for pocket mode");
        const Quaternion w =
            segment_orientation(watch.orientation, calib_, wire::DeviceKind::Watch);
        const Quaternion p =
            segment_orientation(phone.orientation, calib_, wire::DeviceKind::PhonePocket);
        const double height = pressure_height_delta(*watch.pressure_hpa, calib_);
        if (!height_ema_) {
            height_ema_ = height;
        } else {
            const double a = cfg_.enkf.height_ema_alpha;
            height_ema_ = a * height + (1.0 - a) * *height_ema_;
        }
        return {w.w, w.x, w.y, w.z, p.w, p.x, p.y, p.z, *height_ema_};
    }

    Status last_status() const { return status_; }
    const enkf::Ensemble& ensemble() const { return ens_; }

    void reinit() {
        ens_ = enkf::Ensemble{};
        ens_.state_quat_blocks = {0, 4, 8};
        ens_.obs_quat_blocks = {0, 4};
        ens_.process_std = {cfg_.enkf.q_std_la, cfg_.enkf.q_std_ua, cfg_.enkf.q_std_hi};
        ens_.obs_std.assign(8, cfg_.enkf.r_quat);
        ens_.obs_std.push_back(cfg_.enkf.r_height);
        const enkf::StateVec rest = {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0};
        ens_.members.assign(static_cast<std::size_t>(cfg_.enkf.ensemble_size), rest);
        enkf::predict(ens_, enkf::ProcessModel{}, rng_);  // rest pose perturbed by Q
        breach_streak_ = 0;
    }

private:
    static double block_confidence(const enkf::StateVec& var, int off) {
        const double v = (var[off] + var[off + 1] + var[off + 2] + var[off + 3]) / 4.0;
        return std::exp(-50.0 * v);
    }

    void track_divergence(const enkf::ObsVec& obs) {
        const auto mean = enkf::mean_state(ens_);
        const auto predicted = obs_model_(mean);
        const Quaternion ow{obs[0], obs[1], obs[2], obs[3]};
        const Quaternion pw =
            Quaternion{predicted[0], predicted[1], predicted[2], predicted[3]}.normalized();
        const double innovation = geodesic_angle(ow.normalized(), pw);
        if (innovation > kPi / 2) {
            if (++breach_streak_ >= 60) {
                log::warn("pocket filter diverged (innovation ",
                          innovation * 180.0 / kPi, " deg for 60 frames); reinitializing");
                reinit();
                status_ = Status::diverged_reinit;
                return;
            }
        } else {
            breach_streak_ = 0;
        }
        status_ = Status::ok;
    }

    ModeConfig cfg_;
    CalibrationOffsets calib_;
    BodyMeasurements body_;
    enkf::ProcessModel process_;
    enkf::ObsModel obs_model_;
    enkf::Ensemble ens_;
    std::mt19937_64 rng_;
    std::optional<double> height_ema_;
    int breach_streak_ = 0;
    Status status_ = Status::ok;
};

} // namespace wearmocap::est
