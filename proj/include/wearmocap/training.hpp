#pragma once

// Recording -> supervised windows for the LSTM modes. Targets are the
// ground-truth segment quaternions, sign-aligned to their predecessor so
// the regression never straddles the double cover.

#include <string>
#include <vector>

#include "wearmocap/estimators.hpp"
#include "wearmocap/lstm.hpp"
#include "wearmocap/sim.hpp"

namespace wearmocap::training {

struct DatasetOptions {
    wire::TrackingMode mode = wire::TrackingMode::UpperArm;
    int window = 25;
    int stride = 6;  // window start spacing in frames
    double calib_seconds = 1.2;
    BodyMeasurements body;
};

// Builds (window, target) samples from one recording and appends them.
// The recording's rest hold provides the calibration.
inline void append_samples(const sim::Recording& rec, const DatasetOptions& opts,
                           std::vector<lstm::Sample>& out) {
    if (opts.mode == wire::TrackingMode::Pocket)
        throw ValidationError("pocket mode is filter-based and has no training set");
    if (opts.window < 1 || opts.stride < 1)
        throw ValidationError("window and stride must be positive");
    if (rec.truth.size() < static_cast<std::size_t>(opts.window + 2))
        throw DatasetError("recording shorter than one window");

    const double rate =
        1e6 / static_cast<double>(rec.truth[1].timestamp_us - rec.truth[0].timestamp_us);
    const std::size_t calib_n = std::min(
        rec.truth.size() - 1, static_cast<std::size_t>(opts.calib_seconds * rate));
    std::map<wire::DeviceKind, std::vector<wire::SensorFrame>> captures;
    captures[wire::DeviceKind::Watch] = {rec.sensors.watch.begin(),
                                         rec.sensors.watch.begin() + calib_n};
    if (opts.mode == wire::TrackingMode::UpperArm)
        captures[wire::DeviceKind::PhoneUpperArm] = {rec.sensors.phone_upper.begin(),
                                                     rec.sensors.phone_upper.begin() + calib_n};
    const est::CalibrationOffsets calib =
        est::calibrate(captures, est::Posture::ArmDown, opts.body);

    est::ModeConfig cfg = est::ModeConfig::defaults(opts.mode);
    cfg.window = opts.window;

    // Per-frame features once, windows by slicing.
    const std::size_t n = rec.truth.size();
    const int width = cfg.channels();
    std::vector<double> feats;
    feats.reserve(n * static_cast<std::size_t>(width));
    for (std::size_t k = 0; k < n; ++k) {
        const wire::SensorFrame* phone =
            opts.mode == wire::TrackingMode::UpperArm ? &rec.sensors.phone_upper[k] : nullptr;
        const auto f = est::extract_features(rec.sensors.watch[k], phone, calib, cfg);
        feats.insert(feats.end(), f.begin(), f.end());
    }

    // Target quaternions live in the hemisphere of the same-frame feature
    // estimate of the same segment, so the regression never sees a sign
    // flip the inputs cannot explain. The upper-arm segment has no input
    // estimate in watch-only mode; its rotation stays under the shoulder
    // range of motion and is aligned to its predecessor instead.
    std::vector<double> targets;
    targets.reserve(n * 8);
    Quaternion prev_ua;
    for (std::size_t k = 0; k < n; ++k) {
        const double* f = feats.data() + k * static_cast<std::size_t>(width);
        Quaternion la = rec.truth[k].q_la.normalized();
        if (la.w * f[0] + la.x * f[1] + la.y * f[2] + la.z * f[3] < 0.0) la = -la;

        Quaternion ua = rec.truth[k].q_ua.normalized();
        if (opts.mode == wire::TrackingMode::UpperArm) {
            if (ua.w * f[14] + ua.x * f[15] + ua.y * f[16] + ua.z * f[17] < 0.0) ua = -ua;
        } else if (k == 0) {
            ua = ua.canonical();
        } else if (ua.dot(prev_ua) < 0.0) {
            ua = -ua;
        }
        prev_ua = ua;
        targets.insert(targets.end(), {la.w, la.x, la.y, la.z, ua.w, ua.x, ua.y, ua.z});
    }

    for (std::size_t start = 0; start + static_cast<std::size_t>(opts.window) <= n;
         start += static_cast<std::size_t>(opts.stride)) {
        const std::size_t last = start + static_cast<std::size_t>(opts.window) - 1;
        lstm::Sample s;
        s.window.assign(
            feats.begin() + static_cast<std::ptrdiff_t>(start * static_cast<std::size_t>(width)),
            feats.begin() +
                static_cast<std::ptrdiff_t>((last + 1) * static_cast<std::size_t>(width)));
        s.target.assign(targets.begin() + static_cast<std::ptrdiff_t>(last * 8),
                        targets.begin() + static_cast<std::ptrdiff_t>((last + 1) * 8));
        out.push_back(std::move(s));
    }
}

inline std::vector<lstm::Sample> build_dataset(const std::vector<sim::Recording>& recordings,
                                               const DatasetOptions& opts) {
    std::vector<lstm::Sample> out;
    for (const auto& rec : recordings) append_samples(rec, opts, out);
    if (out.empty()) throw DatasetError("no training samples produced");
    return out;
}

} // namespace wearmocap::training
