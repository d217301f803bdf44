#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "retrack/kbe.hpp"
#include "retrack/markov_projection.hpp"
#include "retrack/model.hpp"
#include "retrack/numerics.hpp"
#include "retrack/parallel.hpp"
#include "retrack/path.hpp"

namespace retrack {

enum class IsMode { MC, IS_RHO0, IS_WIENER, IS_BOTH, CE };

inline const char* to_string(IsMode m) {
    switch (m) {
        case IsMode::MC: return "mc";
        case IsMode::IS_RHO0: return "is-rho0";
        case IsMode::IS_WIENER: return "is-w";
        case IsMode::IS_BOTH: return "is-both";
        case IsMode::CE: return "ce";
    }
    return "?";
}

inline IsMode mode_from_string(const std::string& s) {
    if (s == "mc") return IsMode::MC;
    if (s == "is-rho0") return IsMode::IS_RHO0;
    if (s == "is-w") return IsMode::IS_WIENER;
    if (s == "is-both") return IsMode::IS_BOTH;
    if (s == "ce") return IsMode::CE;
    throw NumericError("unknown estimator mode: " + s);
}

/// Exponent applied to the exit probability in the tilted initial density:
/// sqrt for IS wrt the initial condition alone, linear for the combined
/// initial-condition/Wiener change of measure.
enum class TiltPower { Sqrt, Linear };

/// Gaussian initial density tilted along the projected coordinate. The
/// projected marginal is replaced by the fitted 1D Gaussian; the conditional
/// of the remaining directions given the projected value is kept from the
/// original density, so the likelihood ratio reduces to the ratio of the two
/// scalar marginals.
class TiltedInitial {
public:
    TiltedInitial(GaussianDensity original, Projection p, double fit_mean, double fit_std)
        : original_(std::move(original)), projection_(std::move(p)),
          fit_mean_(fit_mean), fit_std_(fit_std) {
        if (!(fit_std_ > 0.0)) throw NumericError("tilted marginal needs positive std");
        auto [m0, s0] = original_.marginal(projection_);
        marginal_mean_ = m0;
        marginal_std_ = s0;
        if (!(s0 > 0.0)) throw NumericError("original projected marginal is degenerate");
        const double denom = projection_.row.dot(original_.covariance() * projection_.row);
        gain_ = original_.covariance() * projection_.row / denom;
    }

    const GaussianDensity& original() const { return original_; }
    const Projection& projection() const { return projection_; }
    double fit_mean() const { return fit_mean_; }
    double fit_std() const { return fit_std_; }
    double marginal_mean() const { return marginal_mean_; }
    double marginal_std() const { return marginal_std_; }

    /// Draws the projected coordinate from the fitted marginal and the rest
    /// from the original conditional (Schur-complement construction; for a
    /// 2D density this is exactly the textbook conditional Gaussian).
    Vector sample(RngStream& rng) const {
        const double y = fit_mean_ + fit_std_ * rng.normal();
        Vector w = original_.sample_centered(rng);
        const double pw = projection_.row.dot(w);
        return original_.mean() + gain_ * (y - marginal_mean_) + (w - gain_ * pw);
    }

    /// L0(x0) = rho0(x0) / tilted(x0); the conditional factors cancel,
    /// leaving the ratio of the 1D marginals at y = P1 x0.
    double likelihood_l0(const Vector& x0) const {
        const double y = projection_.row.dot(x0);
        const double z0 = (y - marginal_mean_) / marginal_std_;
        const double zf = (y - fit_mean_) / fit_std_;
        return fit_std_ / marginal_std_ * std::exp(-0.5 * z0 * z0 + 0.5 * zf * zf);
    }

private:
    GaussianDensity original_;
    Projection projection_;
    double fit_mean_, fit_std_;
    double marginal_mean_ = 0.0, marginal_std_ = 0.0;
    Vector gain_;  // Sigma P1^T / (P1 Sigma P1^T)
};

inline Vector sample_tilted(const TiltedInitial& t, RngStream& rng) { return t.sample(rng); }
inline double likelihood_l0(const TiltedInitial& t, const Vector& x0) {
    return t.likelihood_l0(x0);
}

/// Fits the 1D Gaussian to rho0_marginal(y) * gamma(y, t_n)^p by composite
/// trapezoid quadrature on the PDE grid, extended with gamma = 1 beyond the
/// threshold out to mean + 8 std (and with the boundary value below x_min
/// where the marginal support reaches further left).
inline TiltedInitial fit_tilted_initial(const GaussianDensity& rho0, const Projection& p,
                                        const KbeSolution& sol, TiltPower power) {
    auto [m0, s0] = rho0.marginal(p);
    if (!(s0 > 0.0)) throw NumericError("tilt fit: projected marginal is degenerate");
    const Grid1D& grid = sol.grid;
    const double expo = power == TiltPower::Sqrt ? 0.5 : 1.0;

    const double lo = std::min(grid.x_min, m0 - 8.0 * s0);
    const double hi = std::max(sol.threshold, m0 + 8.0 * s0);
    const int n_lo = static_cast<int>(std::ceil((grid.x_min - lo) / grid.dx - 1e-12));
    const int n_hi = static_cast<int>(std::ceil((hi - sol.threshold) / grid.dx - 1e-12));
    const int n = n_lo + grid.nx + n_hi;  // cells

    const double inv_norm = 1.0 / (std::sqrt(2.0 * 3.14159265358979323846) * s0);
    const double left_gamma = std::pow(std::max(sol.at(0, 0), 0.0), expo);
    double z = 0.0, s1 = 0.0, s2 = 0.0;
    double prev_w = 0.0, prev_y = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double y = grid.x_min + (i - n_lo) * grid.dx;
        double g;
        if (i < n_lo)
            g = left_gamma;
        else if (i <= n_lo + grid.nx)
            g = std::pow(std::max(sol.at(0, i - n_lo), 0.0), expo);
        else
            g = 1.0;  // gamma == 1 at and beyond the threshold
        const double zy = (y - m0) / s0;
        const double w = inv_norm * std::exp(-0.5 * zy * zy) * g;
        if (i > 0) {
            const double half = 0.5 * (y - prev_y);
            z += half * (w + prev_w);
            s1 += half * (w * y + prev_w * prev_y);
            s2 += half * (w * y * y + prev_w * prev_y * prev_y);
        }
        prev_w = w;
        prev_y = y;
    }
    if (!(z > 1e-300))
        throw NumericError("tilt fit: normalizing constant underflows; event unreachable "
                           "on this grid");
    const double mean = s1 / z;
    const double var = s2 / z - mean * mean;
    if (!(var > 0.0)) throw NumericError("tilt fit: quadrature produced non-positive variance");
    return TiltedInitial(rho0, p, mean, std::sqrt(var));
}

/// Point estimate with its sampling error and confidence interval.
struct EstimatorReport {
    std::string model;
    double threshold = 0.0;
    IsMode mode = IsMode::MC;
    long long n_samples = 0;
    double alpha_hat = 0.0;
    double variance = 0.0;  // variance of the estimator, (m2 - alpha^2)/J
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    double rel_err_pct = 0.0;  // z_c sqrt(V)/alpha in percent, z_c = 1.96
    double mass_mean = 0.0;    // E[L0 L_W] without the indicator; 1 in expectation
    double mass_se = 0.0;
    long long failed_paths = 0;
    bool rare_event_warning = false;
    double seconds = 0.0;
    std::uint64_t seed = 0;
};

inline constexpr double kZc = 1.96;

/// Everything a mode needs beyond the model: the 1D coefficients (exact for
/// d = 1, regression surrogate otherwise), the solved backward equation, the
/// tilted initial density and the switched control field.
struct IsArtifacts {
    std::optional<Coefficients1D> coeffs;
    std::optional<SurrogateCoefficients> surrogate;
    std::shared_ptr<KbeSolution> kbe;
    std::optional<TiltedInitial> tilt;
    std::optional<ControlField> control;
};

struct PdeSetup {
    double x_min = -5.0;
    double dx = 0.005;
    double dt = 0.0025;
    double patch_dx = 0.185;  // snapped to node multiples against the built grid
    double patch_dt = 0.0225;
};

struct PilotSetup {
    // Cubic basis: the quadratic fit leaves the Langevin conditional drift
    // with bin-level bias beyond three cluster standard errors.
    int degree = 3;
    int n_paths = 10000;
    double b2_floor = 1e-8;
};

inline IsArtifacts prepare_is_artifacts(IsMode mode, const SdeModel& model,
                                        const RareEvent& event, const GaussianDensity& rho0,
                                        const PathConfig& cfg, const PdeSetup& pde,
                                        const PilotSetup& pilot, std::uint64_t seed,
                                        int threads = 1) {
    IsArtifacts art;
    if (mode == IsMode::MC || mode == IsMode::CE) return art;

    if (model.dim_state == 1) {
        art.coeffs = coefficients_from_model_1d(model, event.projection);
    } else {
        RegressionSample sample =
            generate_regression_data(model, event.projection, rho0, pilot.n_paths, cfg,
                                     seed, stream_block::kPilot, threads);
        art.surrogate = fit_surrogate(sample, BasisSpec{pilot.degree}, pilot.b2_floor);
        art.coeffs = art.surrogate->coefficients();
    }

    Grid1D grid = Grid1D::make(pde.x_min, event.threshold, pde.dx, pde.dt, cfg.horizon_end);
    const int px = std::max(1, static_cast<int>(std::lround(pde.patch_dx / grid.dx)));
    const int pt = std::max(1, static_cast<int>(std::lround(pde.patch_dt / grid.dt)));
    art.kbe = std::make_shared<KbeSolution>(
        solve_kbe(*art.coeffs, event.threshold, grid, px * grid.dx, pt * grid.dt));

    if (mode == IsMode::IS_RHO0)
        art.tilt = fit_tilted_initial(rho0, event.projection, *art.kbe, TiltPower::Sqrt);
    if (mode == IsMode::IS_BOTH)
        art.tilt = fit_tilted_initial(rho0, event.projection, *art.kbe, TiltPower::Linear);

    if (mode == IsMode::IS_WIENER || mode == IsMode::IS_BOTH) {
        ControlField pde_field = control_from_gamma(*art.kbe, model, event.projection);
        ControlField asym = asymptotic_control(model, event.projection, *art.coeffs,
                                               event.threshold, cfg.horizon_end);
        art.control = control_with_switch(std::move(pde_field), std::move(asym),
                                          cfg.horizon_end, cfg.delta_t_switch);
    }
    return art;
}

struct EstimateResult {
    EstimatorReport report;
    std::vector<double> weights;  // per-sample 1_U L0 L_W, kept for bootstrap
};

/// Moments, CI and relative error from stored per-sample weights. The MC
/// variance formula (alpha - alpha^2)/J is the special case of indicator
/// weights, since then m2 == alpha.
inline EstimatorReport finalize_report(std::string model_name, double threshold, IsMode mode,
                                       std::span<const double> weights,
                                       std::span<const double> masses, std::uint64_t seed) {
    const double J = static_cast<double>(weights.size());
    const double alpha = pairwise_sum(weights) / J;
    std::vector<double> sq(weights.size());
    for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = weights[i] * weights[i];
    const double m2 = pairwise_sum(sq) / J;
    const double mass_mean = pairwise_sum(masses) / J;
    for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = masses[i] * masses[i];
    const double mass_m2 = pairwise_sum(sq) / J;

    EstimatorReport rep;
    rep.model = std::move(model_name);
    rep.threshold = threshold;
    rep.mode = mode;
    rep.n_samples = static_cast<long long>(weights.size());
    rep.alpha_hat = alpha;
    rep.variance = std::max(m2 - alpha * alpha, 0.0) / J;
    rep.ci_lo = alpha - kZc * std::sqrt(rep.variance);
    rep.ci_hi = alpha + kZc * std::sqrt(rep.variance);
    rep.rel_err_pct = alpha > 0.0 ? 100.0 * kZc * std::sqrt(rep.variance) / alpha
                                  : std::numeric_limits<double>::quiet_NaN();
    rep.mass_mean = mass_mean;
    rep.mass_se = std::sqrt(std::max(mass_m2 - mass_mean * mass_mean, 0.0) / J);
    rep.rare_event_warning = !(alpha > 0.0);
    rep.seed = seed;
    return rep;
}

/// Runs J weighted paths for the given mode. Per-sample RNG streams make the
/// result independent of the thread count; moments reduce through pairwise
/// summation over the stored weight array.
inline EstimateResult estimate(IsMode mode, const SdeModel& model, const RareEvent& event,
                               const GaussianDensity& rho0, const PathConfig& cfg,
                               long long n_samples, std::uint64_t seed,
                               std::uint64_t stream_base, int threads,
                               const IsArtifacts& art) {
    if (mode == IsMode::CE)
        throw NumericError("estimate: mode ce runs through the cross-entropy module");
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();

    const TiltedInitial* tilt = art.tilt ? &*art.tilt : nullptr;
    const ControlField* control = art.control ? &*art.control : nullptr;
    if ((mode == IsMode::IS_RHO0 || mode == IsMode::IS_BOTH) && tilt == nullptr)
        throw NumericError("estimate: tilt artifact missing for the requested mode");
    if ((mode == IsMode::IS_WIENER || mode == IsMode::IS_BOTH) && control == nullptr)
        throw NumericError("estimate: control artifact missing for the requested mode");
    if (mode == IsMode::MC || mode == IsMode::IS_WIENER) tilt = nullptr;
    if (mode == IsMode::MC || mode == IsMode::IS_RHO0) control = nullptr;

    EstimateResult result;
    result.weights.assign(static_cast<std::size_t>(n_samples), 0.0);
    std::vector<double> masses(static_cast<std::size_t>(n_samples), 0.0);
    std::atomic<long long> failures{0};

    parallel_for(static_cast<std::size_t>(n_samples), threads, [&](std::size_t i) {
        RngStream rng(seed, stream_base + i);
        const Vector x0 = tilt ? tilt->sample(rng) : rho0.sample(rng);
        const double l0 = tilt ? tilt->likelihood_l0(x0) : 1.0;
        const PathOutcome o = simulate_path(model, event, x0, control, cfg, rng);
        if (o.failed) {
            failures.fetch_add(1, std::memory_order_relaxed);
            return;
        }
        const double mass = l0 * std::exp(o.log_likelihood_w);
        masses[i] = mass;
        if (o.hit) result.weights[i] = mass;
    });

    result.report = finalize_report(model.name, event.threshold, mode, result.weights,
                                    masses, seed);
    result.report.failed_paths = failures.load();
    result.report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

}  // namespace retrack
