#pragma once

#include <stdexcept>
#include <string>

namespace mfg {

// Base class for every error this library throws deliberately.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Configuration / input validation problems (CLI exit code 1).
struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(what) {}
};

// Model parameter outside its admissible range.
struct ParamOutOfRange : ConfigError {
    explicit ParamOutOfRange(const std::string& what) : ConfigError(what) {}
};

// Exact optimal transport requested in a regime we do not support
// (d > 1 with non-uniform weights, or point count above the assignment cap).
struct UnsupportedTransport : Error {
    explicit UnsupportedTransport(const std::string& what) : Error(what) {}
};

// Newton iteration on the control first-order condition failed to converge.
// Carries the last iterate so callers can diagnose.
struct NewtonDiverged : Error {
    NewtonDiverged(const std::string& what, double last_alpha, double last_residual,
                   bool inside_cone)
        : Error(what), alpha(last_alpha), residual(last_residual), in_cone(inside_cone) {}
    double alpha;
    double residual;
    bool in_cone;
};

// The control Hessian lost positive definiteness at the query point.
struct SingularHessian : Error {
    explicit SingularHessian(const std::string& what) : Error(what) {}
};

// Picard iteration on a backward interval failed; carries the interval index
// so the global solver can split that interval and retry.
struct PicardDiverged : Error {
    PicardDiverged(const std::string& what, int interval, double last_change)
        : Error(what), interval_index(interval), change(last_change) {}
    int interval_index;
    double change;
};

// Adaptive interval splitting went below the configured minimum length.
struct IntervalUnderflow : Error {
    explicit IntervalUnderflow(const std::string& what) : Error(what) {}
};

// A hard resource cap (assignment size, jacobian storage) was exceeded.
struct CapExceeded : Error {
    explicit CapExceeded(const std::string& what) : Error(what) {}
};

// The closed-form sufficient condition behind the h2 constants does not hold
// for the declared model constants, and no manual override was supplied.
struct H2SufficientConditionFails : Error {
    explicit H2SufficientConditionFails(const std::string& what) : Error(what) {}
};

}  // namespace mfg
