#pragma once

// Error metrics, mode-comparison reports and the brute-force oracles
// (exact scalar Kalman filter, bootstrap particle filter) the acceptance
// suite checks the estimators against.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "wearmocap/enkf.hpp"
#include "wearmocap/errors.hpp"
#include "wearmocap/estimators.hpp"
#include "wearmocap/geometry.hpp"
#include "wearmocap/sim.hpp"
#include "wearmocap/wire.hpp"

namespace wearmocap::eval {

// Per-frame Euclidean wrist distance in cm between an estimated pose
// stream and ground truth, aligned by nearest timestamp within 20 ms.
inline std::vector<double> position_error(const std::vector<wire::PoseMessage>& est,
                                          const std::vector<sim::GroundTruthFrame>& truth,
                                          double align_tolerance_ms = 20.0) {
    std::vector<double> out;
    const double tol_us = align_tolerance_ms * 1000.0;
    std::size_t j = 0;
    for (const auto& pose : est) {
        auto dist = [&](std::size_t idx) {
            return std::abs(static_cast<double>(truth[idx].timestamp_us) -
                            static_cast<double>(pose.timestamp_us));
        };
        while (j + 1 < truth.size() && dist(j + 1) <= dist(j)) ++j;
        if (j < truth.size() && dist(j) <= tol_us) {
            const Vec3 d = pose.wrist - truth[j].joints.wrist;
            out.push_back(d.norm() * 100.0);
        }
    }
    if (out.empty())
        throw EvalError("no alignable frames between estimate and ground truth");
    return out;
}

struct Summary {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation; 0 for n = 1
    double p95 = 0.0;
    std::size_t n = 0;
};

inline Summary summarize(const std::vector<double>& series) {
    if (series.empty()) throw EvalError("cannot summarize an empty series");
    Summary s;
    s.n = series.size();
    double sum = 0.0;
    for (double v : series) sum += v;
    s.mean = sum / static_cast<double>(s.n);
    if (s.n > 1) {
        double acc = 0.0;
        for (double v : series) acc += (v - s.mean) * (v - s.mean);
        s.std = std::sqrt(acc / static_cast<double>(s.n - 1));
    }
    std::vector<double> sorted = series;
    std::sort(sorted.begin(), sorted.end());
    std::size_t idx =
        static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(s.n)));
    if (idx > 0) --idx;
    s.p95 = sorted[std::min(idx, sorted.size() - 1)];
    return s;
}

// "6.8 ± 1.6" to one decimal, the usual mean-plus-minus-std convention.
inline std::string format_mean_std(const Summary& s) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f ± %.1f", s.mean, s.std);
    return buf;
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

struct ScalarKalmanSpec {
    double a = 1.0;   // state transition
    double h = 1.0;   // observation map
    double q = 0.0;   // process noise variance
    double r = 1.0;   // observation noise variance
    double x0 = 0.0;  // prior mean
    double p0 = 1.0;  // prior variance
};

struct KalmanResult {
    std::vector<double> means;
    std::vector<double> variances;
};

// Textbook closed-form scalar Kalman recursion; posterior after each
// predict/update pair.
inline KalmanResult kalman_oracle(const ScalarKalmanSpec& spec,
                                  const std::vector<double>& observations) {
    if (!(spec.r > 0.0) || spec.q < 0.0 || spec.p0 < 0.0)
        throw ValidationError("kalman oracle needs r > 0, q >= 0, p0 >= 0");
    KalmanResult out;
    out.means.reserve(observations.size());
    out.variances.reserve(observations.size());
    double mean = spec.x0, var = spec.p0;
    for (double y : observations) {
        const double pm = spec.a * spec.a * var + spec.q;
        const double xm = spec.a * mean;
        const double k = pm * spec.h / (spec.h * spec.h * pm + spec.r);
        mean = xm + k * (y - spec.h * xm);
        var = (1.0 - k * spec.h) * pm;
        out.means.push_back(mean);
        out.variances.push_back(var);
    }
    return out;
}

// Bootstrap particle filter with systematic resampling. The estimate per
// step is the weighted particle mean before resampling, with quaternion
// blocks hemisphere-aligned first.
struct ParticleFilterSpec {
    std::vector<enkf::StateVec> init;
    std::function<void(enkf::StateVec&, std::mt19937_64&)> propagate;
    std::function<double(const enkf::StateVec&, const enkf::ObsVec&)> log_likelihood;
    std::vector<int> quat_blocks;
};

inline std::vector<enkf::StateVec> particle_oracle(const ParticleFilterSpec& spec,
                                                   const std::vector<enkf::ObsVec>& observations,
                                                   std::uint64_t seed) {
    if (spec.init.size() < 2) throw ValidationError("particle filter needs >= 2 particles");
    std::vector<enkf::StateVec> particles = spec.init;
    const std::size_t n = particles.size();
    const std::size_t dim = particles.front().size();
    std::vector<double> logw(n), w(n);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    std::vector<enkf::StateVec> estimates;
    estimates.reserve(observations.size());
    std::vector<enkf::StateVec> resampled(n);

    for (const auto& obs : observations) {
        double max_lw = -1e300;
        for (std::size_t i = 0; i < n; ++i) {
            spec.propagate(particles[i], rng);
            logw[i] = spec.log_likelihood(particles[i], obs);
            max_lw = std::max(max_lw, logw[i]);
        }
        double wsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            w[i] = std::exp(logw[i] - max_lw);
            wsum += w[i];
        }

        // Weighted mean with hemisphere alignment toward particle 0.
        enkf::StateVec mean(dim, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            enkf::StateVec p = particles[i];
            for (int off : spec.quat_blocks) {
                double dot = 0.0;
                for (int k = 0; k < 4; ++k) dot += p[off + k] * particles[0][off + k];
                if (dot < 0.0)
                    for (int k = 0; k < 4; ++k) p[off + k] = -p[off + k];
            }
            for (std::size_t d = 0; d < dim; ++d) mean[d] += w[i] * p[d];
        }
        for (auto& v : mean) v /= wsum;
        for (int off : spec.quat_blocks) {
            double norm = 0.0;
            for (int k = 0; k < 4; ++k) norm += mean[off + k] * mean[off + k];
            norm = std::sqrt(norm);
            if (norm > 1e-12)
                for (int k = 0; k < 4; ++k) mean[off + k] /= norm;
        }
        estimates.push_back(mean);

        // Systematic resampling.
        const double step = wsum / static_cast<double>(n);
        double pointer = u01(rng) * step;
        double cum = w[0];
        std::size_t i = 0;
        for (std::size_t m = 0; m < n; ++m) {
            while (cum < pointer && i + 1 < n) cum += w[++i];
            resampled[m] = particles[i];
            pointer += step;
        }
        particles.swap(resampled);
    }
    return estimates;
}

// Particle-filter spec running the same pocket process/observation models
// as the ensemble filter, for like-for-like comparisons.
inline ParticleFilterSpec pocket_particle_spec(const est::EnkfParams& params,
                                               const BodyMeasurements& body,
                                               double ref_wrist_height, std::size_t n_particles,
                                               std::uint64_t init_seed) {
    ParticleFilterSpec spec;
    spec.quat_blocks = {0, 4, 8};

    const enkf::ProcessModel process = est::pocket_process_model();
    const std::array<double, 3> q_std = {params.q_std_la, params.q_std_ua, params.q_std_hi};
    spec.propagate = [process, q_std](enkf::StateVec& s, std::mt19937_64& rng) {
        process(s);
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (int b = 0; b < 3; ++b) {
            if (q_std[static_cast<std::size_t>(b)] <= 0.0) continue;
            Vec3 axis{gauss(rng), gauss(rng), gauss(rng)};
            while (axis.norm() < 1e-9) axis = {gauss(rng), gauss(rng), gauss(rng)};
            const double angle = q_std[static_cast<std::size_t>(b)] * gauss(rng);
            const Quaternion noise = Quaternion::from_axis_angle(axis, angle);
            const int off = 4 * b;
            const Quaternion q =
                (noise * Quaternion{s[off], s[off + 1], s[off + 2], s[off + 3]}).normalized();
            s[off] = q.w;
            s[off + 1] = q.x;
            s[off + 2] = q.y;
            s[off + 3] = q.z;
        }
    };

    const enkf::ObsModel obs_model = est::pocket_obs_model(body, ref_wrist_height);
    const std::array<double, 9> r_std = {params.r_quat, params.r_quat, params.r_quat,
                                         params.r_quat, params.r_quat, params.r_quat,
                                         params.r_quat, params.r_quat, params.r_height};
    spec.log_likelihood = [obs_model, r_std](const enkf::StateVec& s,
                                             const enkf::ObsVec& obs) {
        enkf::ObsVec predicted = obs_model(s);
        // Hemisphere-align the predicted quaternion blocks to the
        // measurement so residuals live on the short arc.
        for (int off : {0, 4}) {
            double dot = 0.0;
            for (int k = 0; k < 4; ++k) dot += predicted[off + k] * obs[off + k];
            if (dot < 0.0)
                for (int k = 0; k < 4; ++k) predicted[off + k] = -predicted[off + k];
        }
        double ll = 0.0;
        for (std::size_t c = 0; c < predicted.size(); ++c) {
            const double z = (obs[c] - predicted[c]) / r_std[c];
            ll -= 0.5 * z * z;
        }
        return ll;
    };

    // Rest pose perturbed by the process noise, mirroring the ensemble init.
    std::mt19937_64 rng(init_seed);
    const enkf::StateVec rest = {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0};
    spec.init.assign(n_particles, rest);
    for (auto& p : spec.init) spec.propagate(p, rng);
    return spec;
}

// ---------------------------------------------------------------------------
// Yaw benchmark: the same relative arm motion performed twice, facing
// forward and then turned 90 degrees, with a smooth turn in between. Both
// phases contain identical poses, so any error difference between them is
// attributable to the body yaw alone.
// ---------------------------------------------------------------------------

struct YawBenchmark {
    std::vector<sim::GroundTruthFrame> truth;
    double pre_begin_s = 0.0, pre_end_s = 0.0;    // forward-facing phase
    double post_begin_s = 0.0, post_end_s = 0.0;  // turned phase
};

inline YawBenchmark make_yaw_benchmark(std::uint64_t seed, const BodyMeasurements& body = {},
                                       double motion_s = 24.0, double turn_s = 6.0,
                                       double rate_hz = 60.0) {
    sim::TrajectorySpec spec;
    spec.seed = seed;
    spec.duration_s = sim::kRestHoldSeconds + motion_s;
    spec.rate_hz = rate_hz;
    spec.keypose_count = 1 + static_cast<int>(motion_s / 3.0);
    spec.yaw_profile = sim::YawProfile::Fixed;
    const auto base = sim::gen_trajectory(spec, body);

    const std::size_t hold_n =
        static_cast<std::size_t>(std::llround(sim::kRestHoldSeconds * rate_hz));
    const Quaternion turned = yaw_quat(kPi / 2);

    YawBenchmark out;
    out.truth = base;  // phase 1: hold + motion, facing forward

    // Turn: the arm glides back to rest while the body rotates.
    const double flex_end = est::elbow_flexion_of(base.back().q_ua, base.back().q_la);
    const Quaternion rel_end = base.back().q_ua;  // yaw is zero in phase 1
    const std::size_t turn_n = static_cast<std::size_t>(std::llround(turn_s * rate_hz));
    const std::uint64_t frame_us =
        static_cast<std::uint64_t>(std::llround(1e6 / rate_hz));
    std::uint64_t ts = base.back().timestamp_us;
    for (std::size_t k = 1; k <= turn_n; ++k) {
        const double u = static_cast<double>(k) / static_cast<double>(turn_n);
        const double s = u * u * (3.0 - 2.0 * u);
        ts += frame_us;
        sim::GroundTruthFrame f;
        f.timestamp_us = ts;
        f.q_hi = yaw_quat(s * kPi / 2);
        const Quaternion rel = slerp(rel_end, Quaternion::identity(), s);
        const double flex = flex_end * (1.0 - s);
        f.q_ua = (f.q_hi * rel).normalized();
        f.q_la = (f.q_ua * elbow_hinge(flex)).normalized();
        f.joints = forward_kinematics(f.q_ua, f.q_la, f.q_hi, body);
        out.truth.push_back(f);
    }

    // Phase 2: replay the motion part of phase 1, turned 90 degrees.
    for (std::size_t k = hold_n; k < base.size(); ++k) {
        ts += frame_us;
        sim::GroundTruthFrame f;
        f.timestamp_us = ts;
        f.q_hi = turned;
        f.q_ua = (turned * base[k].q_ua).normalized();
        f.q_la = (turned * base[k].q_la).normalized();
        f.joints = forward_kinematics(f.q_ua, f.q_la, f.q_hi, body);
        out.truth.push_back(f);
    }

    const double phase1_end = static_cast<double>(base.back().timestamp_us) * 1e-6;
    out.pre_begin_s = sim::kRestHoldSeconds + 1.0;
    out.pre_end_s = phase1_end;
    out.post_begin_s = phase1_end + turn_s + 1.0;
    out.post_end_s = static_cast<double>(out.truth.back().timestamp_us) * 1e-6;
    return out;
}

// Mean error of the series inside [begin_s, end_s], by pose timestamp.
inline double phase_mean(const std::vector<double>& series,
                         const std::vector<wire::PoseMessage>& poses, double begin_s,
                         double end_s) {
    if (series.size() != poses.size())
        throw EvalError("phase_mean needs one error per pose");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < series.size(); ++i) {
        const double t = static_cast<double>(poses[i].timestamp_us) * 1e-6;
        if (t >= begin_s && t <= end_s) {
            sum += series[i];
            ++n;
        }
    }
    if (n == 0) throw EvalError("no poses inside the phase window");
    return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Mode comparison
// ---------------------------------------------------------------------------

struct ModeReportRow {
    wire::TrackingMode mode;
    Summary stats;
    double ms_per_frame = 0.0;
};

struct CompareOptions {
    std::vector<wire::TrackingMode> modes = {wire::TrackingMode::WatchOnly,
                                             wire::TrackingMode::UpperArm,
                                             wire::TrackingMode::Pocket};
    std::string watch_weights;
    std::string upper_weights;
    BodyMeasurements body;
    double calib_seconds = 1.2;
    int window = 25;
    est::EnkfParams enkf;
};

// Runs each requested mode over a recording (streams are row-aligned, so
// pairing is trivial), calibrating from the rest hold at the head.
inline std::vector<ModeReportRow> compare_modes(const sim::Recording& rec,
                                                const CompareOptions& opts) {
    if (rec.truth.size() < 10) throw EvalError("recording too short to evaluate");
    const double rate =
        1e6 / static_cast<double>(rec.truth[1].timestamp_us - rec.truth[0].timestamp_us);
    const std::size_t calib_n =
        std::min(rec.truth.size() - 1,
                 static_cast<std::size_t>(opts.calib_seconds * rate));

    std::map<wire::DeviceKind, std::vector<wire::SensorFrame>> captures;
    captures[wire::DeviceKind::Watch] = {rec.sensors.watch.begin(),
                                         rec.sensors.watch.begin() + calib_n};
    captures[wire::DeviceKind::PhoneUpperArm] = {rec.sensors.phone_upper.begin(),
                                                 rec.sensors.phone_upper.begin() + calib_n};
    captures[wire::DeviceKind::PhonePocket] = {rec.sensors.phone_pocket.begin(),
                                               rec.sensors.phone_pocket.begin() + calib_n};
    const est::CalibrationOffsets calib = est::calibrate(captures, est::Posture::ArmDown,
                                                         opts.body);

    auto load_model = [&](const std::string& path, wire::TrackingMode mode) {
        if (path.empty())
            throw EvalError(std::string("no model file configured for mode ") +
                            wire::to_string(mode));
        try {
            return lstm::load_weights(path);
        } catch (const WeightsError& e) {
            throw EvalError(std::string("cannot load model for mode ") +
                            wire::to_string(mode) + ": " + e.what());
        }
    };

    std::vector<ModeReportRow> rows;
    for (const wire::TrackingMode mode : opts.modes) {
        est::ModeConfig cfg = est::ModeConfig::defaults(mode);
        cfg.window = opts.window;
        cfg.enkf = opts.enkf;

        std::vector<wire::PoseMessage> poses;
        poses.reserve(rec.truth.size());
        const auto t0 = std::chrono::steady_clock::now();

        if (mode == wire::TrackingMode::WatchOnly) {
            est::WatchOnlyEstimator estr(cfg, calib, opts.body,
                                         load_model(opts.watch_weights, mode));
            for (const auto& w : rec.sensors.watch)
                if (auto pose = estr.step(w)) poses.push_back(pose->to_message());
        } else if (mode == wire::TrackingMode::UpperArm) {
            est::UpperArmEstimator estr(cfg, calib, opts.body,
                                        load_model(opts.upper_weights, mode));
            for (std::size_t k = 0; k < rec.sensors.watch.size(); ++k)
                if (auto pose =
                        estr.step(rec.sensors.watch[k], rec.sensors.phone_upper[k]))
                    poses.push_back(pose->to_message());
        } else {
            est::PocketEstimator estr(cfg, calib, opts.body);
            for (std::size_t k = 0; k < rec.sensors.watch.size(); ++k)
                poses.push_back(
                    estr.step(rec.sensors.watch[k], rec.sensors.phone_pocket[k]).to_message());
        }

        const double total_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();

        ModeReportRow row;
        row.mode = mode;
        row.stats = summarize(position_error(poses, rec.truth));
        row.ms_per_frame = total_ms / static_cast<double>(rec.sensors.watch.size());
        rows.push_back(row);
    }
    return rows;
}

// Human-readable table mirroring the usual mean-plus-minus-std layout,
// with a trials column.
inline std::string render_table(const std::vector<ModeReportRow>& rows) {
    std::string out = "mode        dist (cm)      p95 (cm)   n      ms/frame\n";
    for (const auto& r : rows) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%-11s %-14s %-10.1f %-6zu %.3f\n",
                      wire::to_string(r.mode), format_mean_std(r.stats).c_str(), r.stats.p95,
                      r.stats.n, r.ms_per_frame);
        out += buf;
    }
    return out;
}

// Machine-readable form; metric columns are deterministic given seeds,
// ms_per_frame is wall clock.
inline void write_report_csv(const std::vector<ModeReportRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ParseError("cannot open report for write: " + path);
    f << "mode,mean_cm,std_cm,p95_cm,n,ms_per_frame\n";
    for (const auto& r : rows) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.9g,%zu,%.3f\n", wire::to_string(r.mode),
                      r.stats.mean, r.stats.std, r.stats.p95, r.stats.n, r.ms_per_frame);
        f << buf;
    }
}

} // namespace wearmocap::eval
