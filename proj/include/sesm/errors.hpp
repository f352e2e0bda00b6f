#pragma once

#include <stdexcept>
#include <string>

namespace sesm {

// Thrown when an operation receives operands whose shapes do not conform.
// Carries the op name and both shape strings so callers can report precisely.
class ShapeError : public std::runtime_error {
public:
    ShapeError(const std::string& op, const std::string& lhs, const std::string& rhs)
        : std::runtime_error(op + ": incompatible shapes " + lhs + " vs " + rhs),
          op_(op), lhs_(lhs), rhs_(rhs) {}

    const std::string& op() const noexcept { return op_; }
    const std::string& lhs() const noexcept { return lhs_; }
    const std::string& rhs() const noexcept { return rhs_; }

private:
    std::string op_, lhs_, rhs_;
};

// Numeric failure: non-finite values in debug mode, divergence, bad math inputs.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad input data: malformed files, out-of-range ids, mode mismatches.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid command-line usage or configuration.
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// When true, ops validate their outputs for non-finite values and throw
// NumericError on violation. Defaults to on in debug builds, off in release
// (where NaN propagates to the divergence check in the trainer).
inline bool& debug_checks() {
#ifdef NDEBUG
    static bool enabled = false;
#else
    static bool enabled = true;
#endif
    return enabled;
}

} // namespace sesm
