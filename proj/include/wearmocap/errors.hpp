#pragma once

#include <stdexcept>
#include <string>

namespace wearmocap {

// Base class for every typed error the library raises.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A rotation was requested with a quaternion that is not unit length.
struct InvalidRotationError : Error {
    using Error::Error;
};

// Normalize/inverse of a (near-)zero quaternion.
struct DegenerateQuaternionError : Error {
    using Error::Error;
};

// Yaw extraction with the forward axis mapped onto the up axis.
struct UndefinedYawError : Error {
    using Error::Error;
};

// Tensor/vector shape mismatch.
struct DimensionError : Error {
    using Error::Error;
};

// Field values outside their documented range (non-finite sensor data,
// implausible body measurements, bad parameters).
struct ValidationError : Error {
    using Error::Error;
};

// Orientation spread too large while capturing the calibration posture.
struct CalibrationError : Error {
    CalibrationError(const std::string& msg, double spread_deg)
        : Error(msg), spread_deg(spread_deg) {}
    double spread_deg = 0.0;
};

// Socket setup failure (bind/connect/resolve).
struct BindError : Error {
    using Error::Error;
};

// Weight file could not be loaded (bad magic, version, shape, truncation).
struct WeightsError : Error {
    using Error::Error;
};

// Text input (CSV, config) could not be parsed. line == 0 means unknown.
struct ParseError : Error {
    ParseError(const std::string& msg, std::size_t line = 0)
        : Error(msg), line(line) {}
    std::size_t line = 0;
};

// Trajectory specification cannot be realized (e.g. velocity cap too low).
struct TrajectoryError : Error {
    using Error::Error;
};

// Training dataset unusable (empty, inconsistent, loss went non-finite).
struct DatasetError : Error {
    using Error::Error;
};

// Evaluation inputs unusable (no time overlap, empty series, missing model).
struct EvalError : Error {
    using Error::Error;
};

} // namespace wearmocap
