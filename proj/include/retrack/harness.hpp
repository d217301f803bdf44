#pragma once

#include <chrono>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "retrack/bootstrap.hpp"
#include "retrack/config.hpp"
#include "retrack/cross_entropy.hpp"
#include "retrack/enkf.hpp"
#include "retrack/importance.hpp"

namespace retrack {

/// Deterministic CSV number formatting (shortest round-trippable %.12g).
inline std::string csv_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

struct TableCell {
    EstimatorReport report;
    double vr_ratio = std::numeric_limits<double>::quiet_NaN();
    std::string status = "ok";
};

namespace detail {

inline const IsMode kModeOrder[] = {IsMode::MC, IsMode::CE, IsMode::IS_RHO0,
                                    IsMode::IS_WIENER, IsMode::IS_BOTH};

inline int mode_ordinal(IsMode m) {
    for (int i = 0; i < 5; ++i)
        if (kModeOrder[i] == m) return i;
    return 0;
}

inline bool wants(const std::vector<IsMode>& modes, IsMode m) {
    for (IsMode x : modes)
        if (x == m) return true;
    return false;
}

}  // namespace detail

/// Runs the full (threshold x mode) table of one config. The crude MC cell
/// always runs (the variance-reduction column is defined against the same-J
/// MC run) and the 1D surrogate coefficients are shared across thresholds.
/// Per-cell failures land in the status column and the run continues.
inline std::vector<TableCell> run_table(const ExperimentConfig& cfg, int threads,
                                        std::ostream* progress = nullptr) {
    const SdeModel model = build_model(cfg);
    const PathConfig path_cfg = build_path_config(cfg);
    const GaussianDensity rho0 = build_rho0(cfg, model);
    const std::vector<double> thresholds = build_thresholds(cfg);
    std::vector<IsMode> modes = build_modes(cfg);
    const long long n_samples = cfg.get_long("j");
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_long("seed", 1));
    const CeConfig ce_cfg = build_ce_config(cfg);
    const PilotSetup pilot = build_pilot_setup(cfg);

    bool needs_pde = false;
    for (IsMode m : modes)
        if (m == IsMode::IS_RHO0 || m == IsMode::IS_WIENER || m == IsMode::IS_BOTH)
            needs_pde = true;

    // Pilot regression does not depend on the threshold; fit it once.
    std::optional<Coefficients1D> coeffs;
    std::optional<SurrogateCoefficients> surrogate;
    if (needs_pde) {
        if (model.dim_state == 1) {
            coeffs = coefficients_from_model_1d(model, build_projection(cfg, model));
        } else {
            RegressionSample sample = generate_regression_data(
                model, build_projection(cfg, model), rho0, pilot.n_paths, path_cfg, seed,
                stream_block::kPilot, threads);
            surrogate = fit_surrogate(sample, BasisSpec{pilot.degree}, pilot.b2_floor);
            coeffs = surrogate->coefficients();
        }
    }

    std::vector<TableCell> cells;
    for (std::size_t ki = 0; ki < thresholds.size(); ++ki) {
        const double k = thresholds[ki];
        const RareEvent event = build_event(cfg, model, k);

        std::shared_ptr<KbeSolution> kbe;
        std::string pde_status = "ok";
        if (needs_pde) {
            try {
                const PdeSetup pde = build_pde_setup(cfg, model, k);
                Grid1D grid =
                    Grid1D::make(pde.x_min, k, pde.dx, pde.dt, path_cfg.horizon_end);
                const int px =
                    std::max(1, static_cast<int>(std::lround(pde.patch_dx / grid.dx)));
                const int pt =
                    std::max(1, static_cast<int>(std::lround(pde.patch_dt / grid.dt)));
                kbe = std::make_shared<KbeSolution>(
                    solve_kbe(*coeffs, k, grid, px * grid.dx, pt * grid.dt));
            } catch (const std::exception& e) {
                pde_status = std::string("error: ") + e.what();
            }
        }

        double mc_variance = std::numeric_limits<double>::quiet_NaN();
        for (int ord = 0; ord < 5; ++ord) {
            const IsMode mode = detail::kModeOrder[ord];
            if (mode != IsMode::MC && !detail::wants(modes, mode)) continue;
            const std::uint64_t cell_base =
                stream_block::kEstimate +
                (static_cast<std::uint64_t>(ki) * 8 + ord) * stream_block::kCell;

            TableCell cell;
            const auto t0 = std::chrono::steady_clock::now();
            try {
                if (mode == IsMode::CE) {
                    cell.report = ce_estimate(model, event, rho0, path_cfg, ce_cfg,
                                              n_samples, seed, threads)
                                      .report;
                } else if (mode == IsMode::MC) {
                    cell.report = estimate(mode, model, event, rho0, path_cfg, n_samples,
                                           seed, cell_base, threads, IsArtifacts{})
                                      .report;
                } else {
                    if (!kbe) throw NumericError(pde_status);
                    IsArtifacts art;
                    art.coeffs = coeffs;
                    art.surrogate = surrogate;
                    art.kbe = kbe;
                    if (mode == IsMode::IS_RHO0)
                        art.tilt = fit_tilted_initial(rho0, event.projection, *kbe,
                                                      TiltPower::Sqrt);
                    if (mode == IsMode::IS_BOTH)
                        art.tilt = fit_tilted_initial(rho0, event.projection, *kbe,
                                                      TiltPower::Linear);
                    if (mode == IsMode::IS_WIENER || mode == IsMode::IS_BOTH) {
                        ControlField pde_field = control_from_gamma(*kbe, model, event.projection);
                        ControlField asym =
                            asymptotic_control(model, event.projection, *coeffs, k,
                                               path_cfg.horizon_end);
                        art.control = control_with_switch(std::move(pde_field), std::move(asym),
                                                          path_cfg.horizon_end,
                                                          path_cfg.delta_t_switch);
                    }
                    cell.report = estimate(mode, model, event, rho0, path_cfg, n_samples,
                                           seed, cell_base, threads, art)
                                      .report;
                }
            } catch (const std::exception& e) {
                cell.status = std::string("error: ") + e.what();
                cell.report.model = model.name;
                cell.report.threshold = k;
                cell.report.mode = mode;
                cell.report.n_samples = n_samples;
                cell.report.seed = seed;
            }
            cell.report.seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

            if (cell.status == "ok") {
                if (mode == IsMode::MC) {
                    mc_variance = cell.report.variance;
                    cell.vr_ratio = 1.0;
                } else if (mc_variance > 0.0 && cell.report.variance > 0.0) {
                    cell.vr_ratio = mc_variance / cell.report.variance;
                }
            }
            if (progress) {
                (*progress) << model.name << " K=" << csv_number(k) << " "
                            << to_string(mode) << ": "
                            << (cell.status == "ok"
                                    ? "alpha=" + csv_number(cell.report.alpha_hat)
                                    : cell.status)
                            << "\n";
            }
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

inline void write_estimate_csv(std::ostream& out, const std::vector<EstimatorReport>& rows) {
    out << "model,k,mode,j,alpha_hat,var,ci_lo,ci_hi,rel_err_pct,seconds,seed\n";
    for (const auto& r : rows) {
        out << r.model << ',' << csv_number(r.threshold) << ',' << to_string(r.mode) << ','
            << r.n_samples << ',' << csv_number(r.alpha_hat) << ',' << csv_number(r.variance)
            << ',' << csv_number(r.ci_lo) << ',' << csv_number(r.ci_hi) << ','
            << csv_number(r.rel_err_pct) << ',' << csv_number(r.seconds) << ',' << r.seed
            << "\n";
    }
}

inline void write_table_csv(std::ostream& out, const std::vector<TableCell>& cells) {
    out << "model,k,mode,j,alpha_hat,var,ci_lo,ci_hi,rel_err_pct,vr_ratio,status,seconds,"
           "seed\n";
    for (const auto& c : cells) {
        const auto& r = c.report;
        out << r.model << ',' << csv_number(r.threshold) << ',' << to_string(r.mode) << ','
            << r.n_samples << ',' << csv_number(r.alpha_hat) << ',' << csv_number(r.variance)
            << ',' << csv_number(r.ci_lo) << ',' << csv_number(r.ci_hi) << ','
            << csv_number(r.rel_err_pct) << ',' << csv_number(c.vr_ratio) << ','
            << '"' << c.status << '"' << ',' << csv_number(r.seconds) << ',' << r.seed << "\n";
    }
}

inline void write_kbe_csv(std::ostream& out, const KbeSolution& sol) {
    out << "t,x,gamma\n";
    for (int m = 0; m <= sol.grid.nt; ++m)
        for (int i = 0; i <= sol.grid.nx; ++i)
            out << csv_number(sol.grid.t(m)) << ',' << csv_number(sol.grid.x(i)) << ','
                << csv_number(sol.at(m, i)) << "\n";
}

inline std::string kbe_sidecar_json(const KbeSolution& sol) {
    nlohmann::json meta;
    meta["x_min"] = sol.grid.x_min;
    meta["x_max"] = sol.grid.x_max;
    meta["dx"] = sol.grid.dx;
    meta["dt"] = sol.grid.dt;
    meta["t_end"] = sol.grid.t_end;
    meta["nx"] = sol.grid.nx;
    meta["nt"] = sol.grid.nt;
    meta["threshold"] = sol.threshold;
    meta["patch_dx"] = sol.patch_dx;
    meta["patch_dt"] = sol.patch_dt;
    meta["gamma_raw_min"] = sol.gamma_raw_min;
    meta["gamma_raw_max"] = sol.gamma_raw_max;
    return meta.dump(2) + "\n";
}

/// Tidy per-report rows for the CI-versus-sample-size figure.
inline void write_ci_vs_j_csv(std::ostream& out, const std::vector<EstimatorReport>& rows) {
    out << "j,mode,alpha,half_width\n";
    for (const auto& r : rows)
        out << r.n_samples << ',' << to_string(r.mode) << ',' << csv_number(r.alpha_hat)
            << ',' << csv_number(kZc * std::sqrt(r.variance)) << "\n";
}

inline std::string ci_vs_j_gnuplot(const std::string& csv_name) {
    std::ostringstream out;
    out << "set datafile separator ','\n"
        << "set logscale x\n"
        << "set xlabel 'J'\n"
        << "set ylabel 'estimate'\n"
        << "plot '" << csv_name << "' using 1:3:4 with yerrorlines title 'alpha with 95% CI'\n";
    return out.str();
}

struct DensityComparison {
    std::vector<double> y;
    std::vector<double> rho0;
    std::vector<double> pde1;  // sqrt-power tilt
    std::vector<double> pde2;  // linear-power tilt
    std::vector<double> ce;
    bool has_ce = false;
};

inline void write_density_csv(std::ostream& out, const DensityComparison& d) {
    out << "y,rho0,pde1,pde2" << (d.has_ce ? ",ce" : "") << "\n";
    for (std::size_t i = 0; i < d.y.size(); ++i) {
        out << csv_number(d.y[i]) << ',' << csv_number(d.rho0[i]) << ','
            << csv_number(d.pde1[i]) << ',' << csv_number(d.pde2[i]);
        if (d.has_ce) out << ',' << csv_number(d.ce[i]);
        out << "\n";
    }
}

inline std::string density_gnuplot(const std::string& csv_name, bool has_ce) {
    std::ostringstream out;
    out << "set datafile separator ','\n"
        << "set xlabel 'y'\n"
        << "set ylabel 'density'\n"
        << "plot '" << csv_name << "' using 1:2 with lines title 'rho0', \\\n"
        << "     '" << csv_name << "' using 1:3 with lines title 'pde1', \\\n"
        << "     '" << csv_name << "' using 1:4 with lines title 'pde2'";
    if (has_ce) out << ", \\\n     '" << csv_name << "' using 1:5 with lines title 'ce'";
    out << "\n";
    return out.str();
}

/// Marginal density grid of the original against the three tilted initial
/// densities for one threshold; the CE column is skipped if the ladder does
/// not converge.
inline DensityComparison density_comparison(const ExperimentConfig& cfg, int threads) {
    const SdeModel model = build_model(cfg);
    const PathConfig path_cfg = build_path_config(cfg);
    const GaussianDensity rho0 = build_rho0(cfg, model);
    const double k = build_thresholds(cfg).front();
    const RareEvent event = build_event(cfg, model, k);
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_long("seed", 1));

    const IsArtifacts art =
        prepare_is_artifacts(IsMode::IS_RHO0, model, event, rho0, path_cfg,
                             build_pde_setup(cfg, model, k), build_pilot_setup(cfg), seed,
                             threads);
    const TiltedInitial pde1 = *art.tilt;
    const TiltedInitial pde2 =
        fit_tilted_initial(rho0, event.projection, *art.kbe, TiltPower::Linear);

    DensityComparison d;
    auto [m0, s0] = rho0.marginal(event.projection);
    double ce_mu = 0.0, ce_sigma = 0.0;
    try {
        const CeConfig ce_cfg = build_ce_config(cfg);
        CeState state;
        state.mu_tilde = m0;
        state.sigma_tilde = s0;
        bool converged = false;
        for (int level = 1; level <= ce_cfg.level_cap; ++level) {
            state = ce_level(state, model, event, rho0, path_cfg, ce_cfg, seed,
                             stream_block::kCrossEntropy +
                                 static_cast<std::uint64_t>(level) * stream_block::kCell,
                             threads);
            if (state.k_hat >= k - 1e-12) {
                converged = true;
                break;
            }
        }
        if (converged) {
            d.has_ce = true;
            ce_mu = state.mu_tilde;
            ce_sigma = state.sigma_tilde;
        }
    } catch (const NumericError&) {
        d.has_ce = false;
    }

    auto pdf = [](double y, double mu, double sigma) {
        const double z = (y - mu) / sigma;
        return std::exp(-0.5 * z * z) / (std::sqrt(2.0 * 3.14159265358979323846) * sigma);
    };
    const double lo = m0 - 5.0 * s0;
    const double hi = std::max(k + s0, m0 + 5.0 * s0);
    const int n = 400;
    for (int i = 0; i <= n; ++i) {
        const double y = lo + (hi - lo) * i / n;
        d.y.push_back(y);
        d.rho0.push_back(pdf(y, m0, s0));
        d.pde1.push_back(pdf(y, pde1.fit_mean(), pde1.fit_std()));
        d.pde2.push_back(pdf(y, pde2.fit_mean(), pde2.fit_std()));
        if (d.has_ce) d.ce.push_back(pdf(y, ce_mu, ce_sigma));
    }
    return d;
}

/// Diagnostic dump of the pilot regression: targets against fitted values.
inline void write_regression_csv(std::ostream& out, const RegressionSample& sample,
                                 const SurrogateCoefficients& fit) {
    out << "t,y,drift_target,drift_fit,b2_target,b2_fit\n";
    for (std::size_t i = 0; i < sample.size(); ++i) {
        const double t = sample.times[i];
        const double y = sample.projected_states[i];
        out << csv_number(t) << ',' << csv_number(y) << ','
            << csv_number(sample.drift_targets[i]) << ','
            << csv_number(fit.drift_value(y, t)) << ','
            << csv_number(sample.diffusion_targets[i]) << ','
            << csv_number(fit.b2_value(y, t)) << "\n";
    }
}

struct BootstrapRow {
    std::string model;
    double threshold;
    IsMode mode;
    long long n_samples;
    BootstrapReport report;
    std::uint64_t seed;
};

inline void write_bootstrap_csv(std::ostream& out, const std::vector<BootstrapRow>& rows) {
    out << "model,k,mode,j,b,std_point,std_lo,std_hi,seed\n";
    for (const auto& r : rows)
        out << r.model << ',' << csv_number(r.threshold) << ',' << to_string(r.mode) << ','
            << r.n_samples << ',' << r.report.resample_count << ','
            << csv_number(r.report.std_point) << ',' << csv_number(r.report.std_lo) << ','
            << csv_number(r.report.std_hi) << ',' << r.seed << "\n";
}

inline void write_enkf_csv(std::ostream& out, const std::vector<WindowRow>& rows,
                           int obs_dim, int state_dim) {
    out << "n";
    for (int i = 0; i < obs_dim; ++i) out << ",y" << i + 1;
    for (int i = 0; i < state_dim; ++i) out << ",m" << i + 1;
    out << ",alpha_hat,ci_lo,ci_hi\n";
    for (const auto& r : rows) {
        out << r.window;
        for (int i = 0; i < obs_dim; ++i)
            out << ',' << (r.observation.size() > i ? csv_number(r.observation[i]) : "nan");
        for (int i = 0; i < state_dim; ++i) out << ',' << csv_number(r.filter_mean[i]);
        out << ',' << csv_number(r.report.alpha_hat) << ',' << csv_number(r.report.ci_lo)
            << ',' << csv_number(r.report.ci_hi) << "\n";
    }
}

}  // namespace retrack
