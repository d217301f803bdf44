#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>

namespace retrack {

/// Error class for failures of the numerical machinery (solver breakdown,
/// degenerate quadrature, rank-deficient regression, ...).
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Pairwise (cascade) summation. Order-insensitive reductions in the
/// estimator paths use this so results do not depend on thread count.
inline double pairwise_sum(std::span<const double> values) {
    const std::size_t n = values.size();
    if (n <= 128) {
        double acc = 0.0;
        for (double v : values) acc += v;
        return acc;
    }
    const std::size_t half = n / 2;
    return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

/// log(erfc(z)) without underflow for large positive z.
/// erfc underflows near z ~ 26.5; past z = 25 the asymptotic expansion
/// erfc(z) ~ exp(-z^2) / (z sqrt(pi)) * (1 - 1/(2z^2) + 3/(4z^4) - 15/(8z^6))
/// is accurate well below the 1e-10 level.
inline double log_erfc(double z) {
    if (z < 25.0) return std::log(std::erfc(z));
    const double zi2 = 1.0 / (z * z);
    const double series = 1.0 + zi2 * (-0.5 + zi2 * (0.75 - 1.875 * zi2));
    return -z * z - std::log(z) - 0.57236494292470008707 + std::log(series);
}

/// log(exp(a) + exp(b)) computed stably.
inline double log_sum_exp(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    const double m = a > b ? a : b;
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace retrack
