#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "retrack/importance.hpp"
#include "retrack/model.hpp"
#include "retrack/parallel.hpp"
#include "retrack/path.hpp"
#include "retrack/rng.hpp"

namespace retrack {

/// The multilevel ladder could not reach the target threshold within the
/// level cap; such configurations are impracticable for this method.
class CeLevelCapError : public NumericError {
public:
    using NumericError::NumericError;
};

struct CeConfig {
    double quantile_beta = 0.01;
    long long pilot_size = 10000;  // J1
    int level_cap = 20;
    // Default keeps sigma fixed and shifts only the mean, which is markedly
    // more robust; the free-variance update is retained for study.
    bool free_variance = false;
};

/// Reference parameters of the tilted projected marginal after ell levels.
struct CeState {
    int level = 0;
    double mu_tilde = 0.0;
    double sigma_tilde = 0.0;
    double k_hat = -std::numeric_limits<double>::infinity();
};

struct CeTraceRow {
    int level;
    double k_hat;
    double mu_tilde;
    double sigma_tilde;
};

namespace detail {
struct CePilot {
    std::vector<double> y0;       // projected initial coordinates
    std::vector<double> run_max;  // running maxima of the projected paths
    std::vector<double> lik;      // marginal likelihood ratio vs the original
};

inline CePilot ce_pilot(const TiltedInitial& tilt, const SdeModel& model,
                        const RareEvent& event, const PathConfig& cfg, long long n,
                        std::uint64_t seed, std::uint64_t stream_base, int threads) {
    CePilot out;
    out.y0.assign(n, 0.0);
    out.run_max.assign(n, 0.0);
    out.lik.assign(n, 0.0);
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
        RngStream rng(seed, stream_base + i);
        const Vector x0 = tilt.sample(rng);
        const PathOutcome o = simulate_path(model, event, x0, nullptr, cfg, rng);
        out.y0[i] = tilt.projection().row.dot(x0);
        out.run_max[i] = o.failed ? -std::numeric_limits<double>::infinity() : o.projected_max;
        out.lik[i] = tilt.likelihood_l0(x0);
    });
    return out;
}
}  // namespace detail

/// Self-normalized weighted mean, the analytic maximizer of the level
/// objective for a Gaussian family.
inline double ce_weighted_mean(std::span<const double> weights,
                               std::span<const double> values) {
    double wsum = 0.0, wv = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        wsum += weights[i];
        wv += weights[i] * values[i];
    }
    if (!(wsum > 0.0))
        throw NumericError("cross-entropy: level unreachable, increase J1 or beta");
    return wv / wsum;
}

/// One multilevel step: draw J1 pilot paths from the current reference
/// Gaussian, set the level threshold to the sample (1-beta)-quantile of the
/// running maxima (never decreasing, capped at K), and update the reference
/// mean by the self-normalized weighted average with indicator-times-
/// likelihood weights over the same sample.
inline CeState ce_level(const CeState& state, const SdeModel& model, const RareEvent& event,
                        const GaussianDensity& rho0, const PathConfig& cfg,
                        const CeConfig& ce, std::uint64_t seed, std::uint64_t stream_base,
                        int threads = 1, CeTraceRow* trace = nullptr) {
    if (ce.pilot_size < 100) throw NumericError("cross-entropy: pilot size must be >= 100");
    const TiltedInitial tilt(rho0, event.projection, state.mu_tilde, state.sigma_tilde);
    detail::CePilot pilot = detail::ce_pilot(tilt, model, event, cfg, ce.pilot_size, seed,
                                             stream_base, threads);

    std::vector<double> sorted = pilot.run_max;
    std::sort(sorted.begin(), sorted.end());
    const long long rank = static_cast<long long>(
        std::ceil((1.0 - ce.quantile_beta) * static_cast<double>(ce.pilot_size)));
    const double quantile = sorted[std::min<long long>(std::max<long long>(rank, 1),
                                                       ce.pilot_size) - 1];
    const double k_hat = std::min(event.threshold, std::max(state.k_hat, quantile));

    std::vector<double> level_weights(ce.pilot_size, 0.0);
    for (long long i = 0; i < ce.pilot_size; ++i)
        if (pilot.run_max[i] >= k_hat) level_weights[i] = pilot.lik[i];
    const double mu_new = ce_weighted_mean(level_weights, pilot.y0);
    double sigma_new = state.sigma_tilde;
    if (ce.free_variance) {
        double wv = 0.0, wsum = 0.0;
        for (long long i = 0; i < ce.pilot_size; ++i) {
            wsum += level_weights[i];
            wv += level_weights[i] * (pilot.y0[i] - mu_new) * (pilot.y0[i] - mu_new);
        }
        sigma_new = std::sqrt(wv / wsum);
        if (!(sigma_new > 0.0))
            throw NumericError("cross-entropy: degenerate variance update");
    }

    CeState next;
    next.level = state.level + 1;
    next.mu_tilde = mu_new;
    next.sigma_tilde = sigma_new;
    next.k_hat = k_hat;
    if (trace) *trace = {next.level, next.k_hat, next.mu_tilde, next.sigma_tilde};
    return next;
}

/// Full multilevel cross-entropy estimate: iterate levels until the ladder
/// reaches K, then estimate with J2 paths from the final tilt, each weighted
/// by the indicator times the likelihood ratio.
inline EstimateResult ce_estimate(const SdeModel& model, const RareEvent& event,
                                  const GaussianDensity& rho0, const PathConfig& cfg,
                                  const CeConfig& ce, long long n_samples,
                                  std::uint64_t seed, int threads = 1,
                                  std::vector<CeTraceRow>* trace = nullptr) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    auto [m0, s0] = rho0.marginal(event.projection);
    if (!(s0 > 0.0)) throw NumericError("cross-entropy: degenerate projected marginal");

    CeState state;
    state.mu_tilde = m0;
    state.sigma_tilde = s0;

    bool converged = false;
    for (int level = 1; level <= ce.level_cap; ++level) {
        CeTraceRow row{};
        state = ce_level(state, model, event, rho0, cfg, ce, seed,
                         stream_block::kCrossEntropy + static_cast<std::uint64_t>(level) *
                                                           stream_block::kCell,
                         threads, &row);
        if (trace) trace->push_back(row);
        if (state.k_hat >= event.threshold - 1e-12) {
            converged = true;
            break;
        }
    }
    if (!converged)
        throw CeLevelCapError("cross-entropy: level cap exceeded before reaching the "
                              "threshold (impracticable configuration)");

    const TiltedInitial tilt(rho0, event.projection, state.mu_tilde, state.sigma_tilde);
    EstimateResult result;
    result.weights.assign(static_cast<std::size_t>(n_samples), 0.0);
    std::vector<double> masses(static_cast<std::size_t>(n_samples), 0.0);
    std::atomic<long long> failures{0};
    const std::uint64_t base = stream_block::kCrossEntropy +
                               static_cast<std::uint64_t>(ce.level_cap + 1) * stream_block::kCell;
    parallel_for(static_cast<std::size_t>(n_samples), threads, [&](std::size_t i) {
        RngStream rng(seed, base + i);
        const Vector x0 = tilt.sample(rng);
        const PathOutcome o = simulate_path(model, event, x0, nullptr, cfg, rng);
        if (o.failed) {
            failures.fetch_add(1, std::memory_order_relaxed);
            return;
        }
        const double lik = tilt.likelihood_l0(x0);
        masses[i] = lik;
        if (o.hit) result.weights[i] = lik;
    });

    result.report = finalize_report(model.name, event.threshold, IsMode::CE, result.weights,
                                    masses, seed);
    result.report.failed_paths = failures.load();
    result.report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

}  // namespace retrack
