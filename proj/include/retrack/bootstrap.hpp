#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "retrack/numerics.hpp"
#include "retrack/parallel.hpp"
#include "retrack/rng.hpp"

namespace retrack {

struct BootstrapReport {
    int resample_count = 0;
    double std_point = 0.0;  // estimator std of the original sample
    double std_lo = 0.0;     // empirical 2.5 / 97.5 percentiles over resamples
    double std_hi = 0.0;
    bool degenerate = false;  // all-equal sample, zero-width interval
};

/// Bootstrap of the estimator's standard deviation: B resamples with
/// replacement, each scoring sqrt((m2 - m^2)/J), then empirical percentiles.
inline BootstrapReport bootstrap_std(std::span<const double> weights, int resamples,
                                     std::uint64_t seed, std::uint64_t stream_base,
                                     int threads = 1) {
    const std::size_t J = weights.size();
    if (J < 100) throw NumericError("bootstrap: sample size must be >= 100");
    if (resamples < 2) throw NumericError("bootstrap: need at least two resamples");

    std::vector<double> stds(resamples, 0.0);
    parallel_for(static_cast<std::size_t>(resamples), threads, [&](std::size_t b) {
        RngStream rng(seed, stream_base + b);
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < J; ++i) {
            const double w = weights[rng.uniform_index(J)];
            s1 += w;
            s2 += w * w;
        }
        const double mean = s1 / static_cast<double>(J);
        const double var = std::max(s2 / static_cast<double>(J) - mean * mean, 0.0);
        stds[b] = std::sqrt(var / static_cast<double>(J));
    });
    std::sort(stds.begin(), stds.end());

    auto percentile = [&](double q) {
        const long long rank =
            static_cast<long long>(std::ceil(q * static_cast<double>(resamples)));
        return stds[std::min<long long>(std::max<long long>(rank, 1), resamples) - 1];
    };

    double s1 = 0.0, s2 = 0.0;
    for (double w : weights) {
        s1 += w;
        s2 += w * w;
    }
    const double mean = s1 / static_cast<double>(J);

    BootstrapReport rep;
    rep.resample_count = resamples;
    rep.std_point = std::sqrt(std::max(s2 / static_cast<double>(J) - mean * mean, 0.0) /
                              static_cast<double>(J));
    rep.std_lo = percentile(0.025);
    rep.std_hi = percentile(0.975);
    rep.degenerate = (stds.front() == stds.back()) && stds.front() == 0.0;
    return rep;
}

}  // namespace retrack
