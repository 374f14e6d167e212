#pragma once

#include <cmath>
#include <limits>

#include "wearmocap/errors.hpp"

// Quaternion algebra, frame conventions and the arm forward-kinematic chain.
//
// World frame: X forward, Y left, Z up, fixed at calibration time.
// Segment orientations are absolute world-frame rotations, not parent
// relative. In the rest pose (arm hanging, facing forward) every segment
// orientation is the identity and both arm bones point along -Z.

namespace wearmocap {

inline constexpr double kPi = 3.14159265358979323846;

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    constexpr Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }

    constexpr double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    constexpr Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }

    Vec3 normalized() const {
        const double n = norm();
        if (n < 1e-12) throw ValidationError("cannot normalize near-zero vector");
        return {x / n, y / n, z / n};
    }
};

inline constexpr Vec3 operator*(double s, const Vec3& v) { return v * s; }

inline constexpr Vec3 kWorldForward{1.0, 0.0, 0.0};
inline constexpr Vec3 kWorldLeft{0.0, 1.0, 0.0};
inline constexpr Vec3 kWorldUp{0.0, 0.0, 1.0};
// Bone direction in the rest pose: the arm hangs straight down.
inline constexpr Vec3 kRestBoneDir{0.0, 0.0, -1.0};

// Unit quaternion representing a rotation. (w,x,y,z) and (-w,-x,-y,-z)
// encode the same rotation; functions that compare rotations treat the
// two representatives as equal.
struct Quaternion {
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

    static constexpr Quaternion identity() { return {1.0, 0.0, 0.0, 0.0}; }

    static Quaternion from_axis_angle(const Vec3& axis, double angle) {
        const Vec3 a = axis.normalized();
        const double half = 0.5 * angle;
        const double s = std::sin(half);
        return {std::cos(half), a.x * s, a.y * s, a.z * s};
    }

    // Exponential map of a rotation vector (axis * angle).
    static Quaternion exp_map(const Vec3& rotvec) {
        const double angle = rotvec.norm();
        if (angle < 1e-12) {
            return Quaternion{1.0, 0.5 * rotvec.x, 0.5 * rotvec.y, 0.5 * rotvec.z}.normalized();
        }
        return from_axis_angle(rotvec, angle);
    }

    constexpr double dot(const Quaternion& o) const {
        return w * o.w + x * o.x + y * o.y + z * o.z;
    }
    double norm() const { return std::sqrt(dot(*this)); }
    bool finite() const {
        return std::isfinite(w) && std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
    }
    bool is_unit(double tol = 1e-6) const { return std::abs(norm() - 1.0) <= tol; }

    Quaternion normalized() const {
        const double n = norm();
        if (n < 1e-12 || !std::isfinite(n))
            throw DegenerateQuaternionError("cannot normalize degenerate quaternion");
        return {w / n, x / n, y / n, z / n};
    }

    constexpr Quaternion conjugate() const { return {w, -x, -y, -z}; }

    Quaternion inverse() const {
        const double n2 = dot(*this);
        if (n2 < 1e-24 || !std::isfinite(n2))
            throw DegenerateQuaternionError("cannot invert degenerate quaternion");
        return {w / n2, -x / n2, -y / n2, -z / n2};
    }

    constexpr Quaternion operator-() const { return {-w, -x, -y, -z}; }

    // Hamilton product.
    constexpr Quaternion operator*(const Quaternion& o) const {
        return {w * o.w - x * o.x - y * o.y - z * o.z,
                w * o.x + x * o.w + y * o.z - z * o.y,
                w * o.y - x * o.z + y * o.w + z * o.x,
                w * o.z + x * o.y - y * o.x + z * o.w};
    }

    // Representative with w >= 0; both signs encode the same rotation.
    constexpr Quaternion canonical() const { return w < 0.0 ? -*this : *this; }

    // Rotation vector (axis * angle) of the shortest arc, length in [0, pi].
    Vec3 log_map() const {
        const Quaternion q = canonical();
        const double vn = std::sqrt(q.x * q.x + q.y * q.y + q.z * q.z);
        if (vn < 1e-12) return {2.0 * q.x, 2.0 * q.y, 2.0 * q.z};
        const double angle = 2.0 * std::atan2(vn, q.w);
        const double s = angle / vn;
        return {q.x * s, q.y * s, q.z * s};
    }
};

inline Vec3 rotate(const Quaternion& q, const Vec3& v) {
    if (!q.is_unit(1e-6))
        throw InvalidRotationError("rotation requires a unit quaternion");
    // q v q* expanded via the double-cross formula.
    const Vec3 u{q.x, q.y, q.z};
    const Vec3 t = 2.0 * u.cross(v);
    return v + q.w * t + u.cross(t);
}

// Angle between two rotations on the quotient space (sign-ambiguity safe).
// atan2 form of 2*acos(|<a,b>|); stable near 0 and pi.
inline double geodesic_angle(const Quaternion& a, const Quaternion& b) {
    const Quaternion bb = a.dot(b) < 0.0 ? -b : b;
    const Quaternion diff{a.w - bb.w, a.x - bb.x, a.y - bb.y, a.z - bb.z};
    const Quaternion sum{a.w + bb.w, a.x + bb.x, a.y + bb.y, a.z + bb.z};
    // The 4D half-angle between unit quaternions is a quarter of the
    // rotation angle they differ by.
    return 4.0 * std::atan2(diff.norm(), sum.norm());
}

inline Quaternion slerp(const Quaternion& a, const Quaternion& b, double t) {
    Quaternion bb = b;
    double d = a.dot(b);
    if (d < 0.0) {
        bb = -b;
        d = -d;
    }
    if (d > 1.0) d = 1.0;
    const double theta = std::acos(d);
    if (theta < 1e-9) {
        // Nearly parallel: linear blend, renormalized.
        Quaternion r{a.w + t * (bb.w - a.w), a.x + t * (bb.x - a.x),
                     a.y + t * (bb.y - a.y), a.z + t * (bb.z - a.z)};
        return r.normalized();
    }
    const double s = std::sin(theta);
    const double ca = std::sin((1.0 - t) * theta) / s;
    const double cb = std::sin(t * theta) / s;
    return Quaternion{ca * a.w + cb * bb.w, ca * a.x + cb * bb.x,
                      ca * a.y + cb * bb.y, ca * a.z + cb * bb.z}
        .normalized();
}

// Rotation of the world forward axis about the up axis, range (-pi, pi].
inline double yaw_of(const Quaternion& q) {
    const Vec3 f = rotate(q, kWorldForward);
    const double horiz2 = f.x * f.x + f.y * f.y;
    if (horiz2 < 1e-12)
        throw UndefinedYawError("forward axis maps onto the up axis; yaw undefined");
    const double yaw = std::atan2(f.y, f.x);
    return yaw == -kPi ? kPi : yaw;
}

// Pure rotation about the world up axis.
inline Quaternion yaw_quat(double angle) {
    return Quaternion::from_axis_angle(kWorldUp, angle);
}

struct BodyMeasurements {
    double upper_arm_len = 0.30;
    double lower_arm_len = 0.28;
    // Shoulder position relative to the body root. The root sits on the
    // body's vertical rotation axis, so turning in place leaves the
    // default shoulder fixed; lateral offsets are supported and then
    // orbit the axis under hip yaw.
    Vec3 shoulder_offset{0.0, 0.0, 0.50};

    void validate() const {
        if (!(upper_arm_len > 0.05 && upper_arm_len < 1.0))
            throw ValidationError("upper_arm_len outside (0.05, 1.0) m");
        if (!(lower_arm_len > 0.05 && lower_arm_len < 1.0))
            throw ValidationError("lower_arm_len outside (0.05, 1.0) m");
        if (!shoulder_offset.finite())
            throw ValidationError("shoulder_offset must be finite");
    }
};

// Joint positions in the calibrated world frame, meters.
struct JointPositions {
    Vec3 shoulder, elbow, wrist;
};

// Maps absolute segment orientations to joint positions. The hip sits at
// the world origin; q_hi carries the body orientation (identity when the
// user faces forward).
inline JointPositions forward_kinematics(const Quaternion& q_ua, const Quaternion& q_la,
                                         const Quaternion& q_hi, const BodyMeasurements& body) {
    body.validate();
    JointPositions out;
    out.shoulder = rotate(q_hi, body.shoulder_offset);
    out.elbow = out.shoulder + rotate(q_ua, kRestBoneDir * body.upper_arm_len);
    out.wrist = out.elbow + rotate(q_la, kRestBoneDir * body.lower_arm_len);
    return out;
}

// Anatomical and atmospheric constants shared by the estimators and the
// device simulator.
inline constexpr double kElbowMaxRad = 150.0 * kPi / 180.0;
inline constexpr double kGravity = 9.81;                    // m/s^2
inline constexpr double kBarometricScaleHeight = 8434.5;    // m, isothermal

// Elbow hinge rotation in the upper-arm frame; positive flexion swings the
// hanging forearm forward, so q_la = q_ua * elbow_hinge(flex).
inline Quaternion elbow_hinge(double flex_rad) {
    return Quaternion::from_axis_angle({0.0, -1.0, 0.0}, flex_rad);
}

} // namespace wearmocap
