#pragma once

// Stochastic (perturbed-observation) ensemble Kalman filter over a flat
// real state vector. Unit-quaternion sub-blocks are declared by offset and
// handled in ambient 4-space: hemisphere alignment before any averaging or
// differencing, renormalization after every linear update. A state with no
// quaternion blocks is a plain linear EnKF, which is how the filter is
// checked against the closed-form Kalman recursion.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "wearmocap/errors.hpp"

namespace wearmocap::enkf {

using StateVec = std::vector<double>;
using ObsVec = std::vector<double>;
using ProcessModel = std::function<void(StateVec&)>;
using ObsModel = std::function<ObsVec(const StateVec&)>;

struct Ensemble {
    std::vector<StateVec> members;
    std::vector<int> state_quat_blocks;  // offsets of 4-wide quaternion blocks
    std::vector<int> obs_quat_blocks;    // same, inside the observation vector
    // Process noise: one angular std (rad) per state quaternion block, or
    // one additive std per component when the state has no quaternion blocks.
    std::vector<double> process_std;
    std::vector<double> obs_std;  // per-observation-channel std (R diagonal)

    std::size_t size() const { return members.size(); }
    std::size_t dim() const { return members.empty() ? 0 : members.front().size(); }

    void validate() const {
        if (members.size() < 2) throw ValidationError("ensemble needs at least 2 members");
        for (const auto& m : members)
            if (m.size() != dim()) throw DimensionError("ragged ensemble members");
        const std::size_t want_q =
            state_quat_blocks.empty() ? dim() : state_quat_blocks.size();
        if (process_std.size() != want_q)
            throw DimensionError("process_std size mismatch");
        for (double s : process_std)
            if (!(s >= 0.0)) throw ValidationError("process noise std must be >= 0");
        for (double s : obs_std)
            if (!(s >= 0.0)) throw ValidationError("observation noise std must be >= 0");
        for (int off : state_quat_blocks)
            if (off < 0 || static_cast<std::size_t>(off) + 4 > dim())
                throw DimensionError("state quaternion block out of range");
    }
};

namespace detail {

inline double block_dot(const double* a, const double* b) {
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3];
}

inline void align_block(double* q, const double* ref) {
    if (block_dot(q, ref) < 0.0)
        for (int k = 0; k < 4; ++k) q[k] = -q[k];
}

// Normalize a quaternion block; a degenerate block falls back to the
// reference instead of blowing up the filter.
inline void normalize_block(double* q, const double* fallback) {
    const double n = std::sqrt(block_dot(q, q));
    if (n < 1e-9 || !std::isfinite(n)) {
        for (int k = 0; k < 4; ++k) q[k] = fallback[k];
        return;
    }
    for (int k = 0; k < 4; ++k) q[k] /= n;
}

// Members with every quaternion block flipped into the hemisphere of the
// first member, so component averages and covariances are meaningful.
inline std::vector<StateVec> aligned_members(const Ensemble& ens) {
    std::vector<StateVec> out = ens.members;
    for (std::size_t i = 1; i < out.size(); ++i)
        for (int off : ens.state_quat_blocks)
            align_block(out[i].data() + off, out[0].data() + off);
    return out;
}

// Left-multiply the quaternion block at q by a random rotation whose angle
// is Normal(0, std).
inline void perturb_quat_block(double* q, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    double ax = gauss(rng), ay = gauss(rng), az = gauss(rng);
    double an = std::sqrt(ax * ax + ay * ay + az * az);
    while (an < 1e-12) {
        ax = gauss(rng);
        ay = gauss(rng);
        az = gauss(rng);
        an = std::sqrt(ax * ax + ay * ay + az * az);
    }
    const double angle = stddev * gauss(rng);
    const double half = 0.5 * angle;
    const double s = std::sin(half) / an;
    const double nw = std::cos(half), nx = ax * s, ny = ay * s, nz = az * s;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    q[0] = nw * w - nx * x - ny * y - nz * z;
    q[1] = nw * x + nx * w + ny * z - nz * y;
    q[2] = nw * y - nx * z + ny * w + nz * x;
    q[3] = nw * z + nx * y - ny * x + nz * w;
}

// Dense row-major Cholesky solve of S X = B (B is n x m, overwritten).
// Returns false if S is not positive definite.
inline bool cholesky_solve(std::vector<double>& s, int n, std::vector<double>& b, int m) {
    // Decompose S = L L^T in place (lower triangle).
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double sum = s[static_cast<std::size_t>(i) * n + j];
            for (int k = 0; k < j; ++k)
                sum -= s[static_cast<std::size_t>(i) * n + k] *
                       s[static_cast<std::size_t>(j) * n + k];
            if (i == j) {
                if (sum <= 0.0 || !std::isfinite(sum)) return false;
                s[static_cast<std::size_t>(i) * n + j] = std::sqrt(sum);
            } else {
                s[static_cast<std::size_t>(i) * n + j] =
                    sum / s[static_cast<std::size_t>(j) * n + j];
            }
        }
    }
    // Forward then backward substitution for every column of B.
    for (int c = 0; c < m; ++c) {
        for (int i = 0; i < n; ++i) {
            double sum = b[static_cast<std::size_t>(i) * m + c];
            for (int k = 0; k < i; ++k)
                sum -= s[static_cast<std::size_t>(i) * n + k] *
                       b[static_cast<std::size_t>(k) * m + c];
            b[static_cast<std::size_t>(i) * m + c] =
                sum / s[static_cast<std::size_t>(i) * n + i];
        }
        for (int i = n - 1; i >= 0; --i) {
            double sum = b[static_cast<std::size_t>(i) * m + c];
            for (int k = i + 1; k < n; ++k)
                sum -= s[static_cast<std::size_t>(k) * n + i] *
                       b[static_cast<std::size_t>(k) * m + c];
            b[static_cast<std::size_t>(i) * m + c] =
                sum / s[static_cast<std::size_t>(i) * n + i];
        }
    }
    return true;
}

} // namespace detail

// Advance every member through the process model, add process noise,
// renormalize quaternion blocks.
inline void predict(Ensemble& ens, const ProcessModel& model, std::mt19937_64& rng) {
    ens.validate();
    for (auto& member : ens.members) {
        if (model) model(member);
        if (ens.state_quat_blocks.empty()) {
            std::normal_distribution<double> gauss(0.0, 1.0);
            for (std::size_t j = 0; j < member.size(); ++j)
                if (ens.process_std[j] > 0.0) member[j] += ens.process_std[j] * gauss(rng);
        } else {
            for (std::size_t bi = 0; bi < ens.state_quat_blocks.size(); ++bi) {
                double* q = member.data() + ens.state_quat_blocks[bi];
                if (ens.process_std[bi] > 0.0)
                    detail::perturb_quat_block(q, ens.process_std[bi], rng);
                detail::normalize_block(q, q);
            }
        }
    }
}

// Stochastic EnKF update with perturbed observations:
//   K = Pxy (Pyy + R)^-1,  member += K (obs + eps - H(member)).
// A singular innovation covariance gets 1e-9 jitter, never a failure.
inline void update(Ensemble& ens, const ObsVec& obs, const ObsModel& obs_model,
                   std::mt19937_64& rng, bool perturb_obs = true) {
    ens.validate();
    const int n_state = static_cast<int>(ens.dim());
    const int n_obs = static_cast<int>(obs.size());
    const std::size_t n = ens.size();
    if (ens.obs_std.size() != obs.size())
        throw DimensionError("obs_std size does not match observation");

    const std::vector<StateVec> aligned = detail::aligned_members(ens);

    // Predicted observations, quaternion blocks flipped toward the measured
    // observation so innovations live on the short arc.
    std::vector<ObsVec> predicted(n);
    for (std::size_t i = 0; i < n; ++i) {
        predicted[i] = obs_model(aligned[i]);
        if (predicted[i].size() != obs.size())
            throw DimensionError("obs_model output size mismatch");
        for (int off : ens.obs_quat_blocks)
            detail::align_block(predicted[i].data() + off, obs.data() + off);
    }

    StateVec xbar(static_cast<std::size_t>(n_state), 0.0);
    ObsVec ybar(static_cast<std::size_t>(n_obs), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (int j = 0; j < n_state; ++j) xbar[j] += aligned[i][j];
        for (int j = 0; j < n_obs; ++j) ybar[j] += predicted[i][j];
    }
    for (auto& v : xbar) v /= static_cast<double>(n);
    for (auto& v : ybar) v /= static_cast<double>(n);

    const double inv_nm1 = 1.0 / static_cast<double>(n - 1);
    std::vector<double> pyy(static_cast<std::size_t>(n_obs) * n_obs, 0.0);
    std::vector<double> pxy(static_cast<std::size_t>(n_state) * n_obs, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (int r = 0; r < n_obs; ++r) {
            const double br = predicted[i][r] - ybar[r];
            for (int c = 0; c < n_obs; ++c)
                pyy[static_cast<std::size_t>(r) * n_obs + c] +=
                    br * (predicted[i][c] - ybar[c]) * inv_nm1;
        }
        for (int r = 0; r < n_state; ++r) {
            const double ar = aligned[i][r] - xbar[r];
            for (int c = 0; c < n_obs; ++c)
                pxy[static_cast<std::size_t>(r) * n_obs + c] +=
                    ar * (predicted[i][c] - ybar[c]) * inv_nm1;
        }
    }
    for (int j = 0; j < n_obs; ++j)
        pyy[static_cast<std::size_t>(j) * n_obs + j] += ens.obs_std[j] * ens.obs_std[j];

    // Solve S K^T = Pxy^T so K = Pxy S^-1.
    std::vector<double> kt(static_cast<std::size_t>(n_obs) * n_state);
    for (int r = 0; r < n_obs; ++r)
        for (int c = 0; c < n_state; ++c)
            kt[static_cast<std::size_t>(r) * n_state + c] =
                pxy[static_cast<std::size_t>(c) * n_obs + r];
    for (double jitter = 1e-9;; jitter *= 10.0) {
        std::vector<double> s = pyy;
        std::vector<double> rhs = kt;
        if (detail::cholesky_solve(s, n_obs, rhs, n_state)) {
            kt = std::move(rhs);
            break;
        }
        for (int j = 0; j < n_obs; ++j) pyy[static_cast<std::size_t>(j) * n_obs + j] += jitter;
        if (jitter > 1e3) throw ValidationError("innovation covariance hopelessly singular");
    }

    std::normal_distribution<double> gauss(0.0, 1.0);
    ObsVec innovation(static_cast<std::size_t>(n_obs));
    for (std::size_t i = 0; i < n; ++i) {
        for (int j = 0; j < n_obs; ++j) {
            const double eps =
                perturb_obs && ens.obs_std[j] > 0.0 ? ens.obs_std[j] * gauss(rng) : 0.0;
            innovation[j] = obs[j] + eps - predicted[i][j];
        }
        StateVec& out = ens.members[i];
        out = aligned[i];
        for (int r = 0; r < n_state; ++r) {
            double delta = 0.0;
            for (int c = 0; c < n_obs; ++c)
                delta += kt[static_cast<std::size_t>(c) * n_state + r] * innovation[c];
            out[r] += delta;
        }
        for (int off : ens.state_quat_blocks) {
            detail::align_block(out.data() + off, aligned[i].data() + off);
            detail::normalize_block(out.data() + off, aligned[i].data() + off);
        }
    }
}

// Hemisphere-aligned component mean with renormalized quaternion blocks.
inline StateVec mean_state(const Ensemble& ens) {
    ens.validate();
    const auto aligned = detail::aligned_members(ens);
    StateVec mean(ens.dim(), 0.0);
    for (const auto& m : aligned)
        for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += m[j];
    for (auto& v : mean) v /= static_cast<double>(ens.size());
    for (int off : ens.state_quat_blocks)
        detail::normalize_block(mean.data() + off, aligned[0].data() + off);
    return mean;
}

// Per-component sample variance over aligned members.
inline StateVec covariance_diag(const Ensemble& ens) {
    ens.validate();
    const auto aligned = detail::aligned_members(ens);
    StateVec mean(ens.dim(), 0.0);
    for (const auto& m : aligned)
        for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += m[j];
    for (auto& v : mean) v /= static_cast<double>(ens.size());

    StateVec var(ens.dim(), 0.0);
    for (const auto& m : aligned)
        for (std::size_t j = 0; j < var.size(); ++j) {
            const double d = m[j] - mean[j];
            var[j] += d * d;
        }
    for (auto& v : var) v /= static_cast<double>(ens.size() - 1);
    return var;
}

// Scale member deviations about the mean by factor >= 1 (covariance
// inflation against ensemble collapse).
inline void inflate(Ensemble& ens, double factor) {
    if (!(factor >= 1.0)) throw ValidationError("inflation factor must be >= 1");
    ens.validate();
    const auto aligned = detail::aligned_members(ens);
    StateVec mean(ens.dim(), 0.0);
    for (const auto& m : aligned)
        for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += m[j];
    for (auto& v : mean) v /= static_cast<double>(ens.size());

    for (std::size_t i = 0; i < ens.size(); ++i) {
        StateVec& out = ens.members[i];
        for (std::size_t j = 0; j < out.size(); ++j)
            out[j] = mean[j] + factor * (aligned[i][j] - mean[j]);
        for (int off : ens.state_quat_blocks)
            detail::normalize_block(out.data() + off, aligned[i].data() + off);
    }
}

} // namespace wearmocap::enkf
