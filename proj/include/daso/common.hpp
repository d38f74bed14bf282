#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace daso {

using Vec = std::vector<double>;

// Error taxonomy. Everything derives from Error so callers can catch broadly;
// the concrete type carries the contract that was violated.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct InputError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct WarmupError : Error {
    using Error::Error;
};
struct DegenerateFeatureError : Error {
    using Error::Error;
};

/// Index of the largest entry; ties resolve to the lowest index.
inline std::size_t argmax(const Vec& v) {
    if (v.empty()) throw InputError("argmax of empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

inline double max_entry(const Vec& v) { return v[argmax(v)]; }

inline double dot(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

inline bool all_finite(const Vec& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

/// Checks that v is a probability vector: entries >= 0, sum within tol of 1.
inline void check_prob_vector(const Vec& v, const char* who, double tol = 1e-9) {
    double s = 0.0;
    for (double x : v) {
        if (!(x >= 0.0)) throw ContractError(std::string(who) + ": negative or NaN entry in probability vector");
        s += x;
    }
    if (std::abs(s - 1.0) > tol) throw ContractError(std::string(who) + ": probability vector sums to " + std::to_string(s));
}

/// Shortest decimal representation that round-trips to the same double.
/// Used for all CSV/JSON numeric output so reruns are byte-identical.
inline std::string fmt_double(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

}  // namespace daso
