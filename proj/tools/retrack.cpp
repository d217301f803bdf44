// Command-line front end: estimate, solve-kbe, enkf-run, run-table, bootstrap.
// Exit codes: 0 success, 2 configuration error, 3 numerical failure.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "retrack/bootstrap.hpp"
#include "retrack/config.hpp"
#include "retrack/cross_entropy.hpp"
#include "retrack/enkf.hpp"
#include "retrack/harness.hpp"
#include "retrack/importance.hpp"

namespace fs = std::filesystem;
using namespace retrack;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    long long seed_override = -1;
    int threads = 0;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "experiment config file")->required();
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--seed", opts.seed_override, "override the config seed");
    cmd->add_option("--threads", opts.threads, "worker threads (0 = hardware)");
}

ExperimentConfig load(const CommonOpts& opts) {
    ExperimentConfig cfg = ExperimentConfig::parse_file(opts.config_path);
    if (opts.seed_override >= 0) cfg.set("seed", std::to_string(opts.seed_override));
    if (!opts.out_dir.empty()) cfg.set("out", opts.out_dir);
    return cfg;
}

int resolve_threads(const ExperimentConfig& cfg, const CommonOpts& opts) {
    long long t = opts.threads > 0 ? opts.threads : cfg.get_long("threads", 0);
    if (t <= 0) t = static_cast<long long>(std::thread::hardware_concurrency());
    return static_cast<int>(std::max<long long>(t, 1));
}

fs::path out_dir(const ExperimentConfig& cfg) {
    fs::path dir = cfg.get_string("out", "results");
    fs::create_directories(dir);
    return dir;
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    return out;
}

struct CeFlags {
    double beta = -1.0;
    long long j1 = -1;
    long long level_cap = -1;
};

int cmd_estimate(const CommonOpts& opts, const std::string& mode_flag, const CeFlags& ce) {
    ExperimentConfig cfg = load(opts);
    if (ce.beta > 0.0) cfg.set("ce.beta", std::to_string(ce.beta));
    if (ce.j1 > 0) cfg.set("ce.j1", std::to_string(ce.j1));
    if (ce.level_cap > 0) cfg.set("ce.level_cap", std::to_string(ce.level_cap));
    const int threads = resolve_threads(cfg, opts);
    const SdeModel model = build_model(cfg);
    const PathConfig path_cfg = build_path_config(cfg);
    const GaussianDensity rho0 = build_rho0(cfg, model);
    const double k = build_thresholds(cfg).front();
    const RareEvent event = build_event(cfg, model, k);
    const long long n_samples = cfg.get_long("j");
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_long("seed", 1));

    std::vector<IsMode> modes;
    if (!mode_flag.empty())
        modes.push_back(mode_from_string(mode_flag));
    else
        modes = build_modes(cfg);

    std::vector<EstimatorReport> reports;
    std::vector<CeTraceRow> trace;
    for (IsMode mode : modes) {
        if (mode == IsMode::CE) {
            reports.push_back(ce_estimate(model, event, rho0, path_cfg, build_ce_config(cfg),
                                          n_samples, seed, threads, &trace)
                                  .report);
        } else {
            const IsArtifacts art =
                prepare_is_artifacts(mode, model, event, rho0, path_cfg,
                                     build_pde_setup(cfg, model, k), build_pilot_setup(cfg),
                                     seed, threads);
            reports.push_back(estimate(mode, model, event, rho0, path_cfg, n_samples, seed,
                                       stream_block::kEstimate, threads, art)
                                  .report);
        }
        std::cout << model.name << " K=" << csv_number(k) << " "
                  << to_string(reports.back().mode)
                  << ": alpha=" << csv_number(reports.back().alpha_hat)
                  << " rel_err=" << csv_number(reports.back().rel_err_pct) << "%\n";
    }

    const fs::path dir = out_dir(cfg);
    auto out = open_out(dir / "estimate.csv");
    write_estimate_csv(out, reports);
    if (!trace.empty()) {
        auto tr = open_out(dir / "ce_trace.csv");
        tr << "level,k_hat,mu_tilde,sigma_tilde\n";
        for (const auto& row : trace)
            tr << row.level << ',' << csv_number(row.k_hat) << ',' << csv_number(row.mu_tilde)
               << ',' << csv_number(row.sigma_tilde) << "\n";
    }
    std::cout << "wrote " << (dir / "estimate.csv").string() << "\n";
    return 0;
}

int cmd_solve_kbe(const CommonOpts& opts) {
    const ExperimentConfig cfg = load(opts);
    const int threads = resolve_threads(cfg, opts);
    const SdeModel model = build_model(cfg);
    const PathConfig path_cfg = build_path_config(cfg);
    const GaussianDensity rho0 = build_rho0(cfg, model);
    const double k = build_thresholds(cfg).front();
    const RareEvent event = build_event(cfg, model, k);
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_long("seed", 1));

    const fs::path dir = out_dir(cfg);
    const PilotSetup pilot = build_pilot_setup(cfg);

    Coefficients1D coeffs;
    if (model.dim_state == 1) {
        coeffs = coefficients_from_model_1d(model, event.projection);
    } else {
        const RegressionSample sample =
            generate_regression_data(model, event.projection, rho0, pilot.n_paths,
                                     path_cfg, seed, stream_block::kPilot, threads);
        const SurrogateCoefficients fit =
            fit_surrogate(sample, BasisSpec{pilot.degree}, pilot.b2_floor);
        auto reg = open_out(dir / "regression.csv");
        write_regression_csv(reg, sample, fit);
        coeffs = fit.coefficients();
    }

    const PdeSetup pde = build_pde_setup(cfg, model, k);
    Grid1D grid = Grid1D::make(pde.x_min, k, pde.dx, pde.dt, path_cfg.horizon_end);
    const int px = std::max(1, static_cast<int>(std::lround(pde.patch_dx / grid.dx)));
    const int pt = std::max(1, static_cast<int>(std::lround(pde.patch_dt / grid.dt)));
    const KbeSolution sol = solve_kbe(coeffs, k, grid, px * grid.dx, pt * grid.dt);

    auto out = open_out(dir / "kbe_gamma.csv");
    write_kbe_csv(out, sol);
    auto meta = open_out(dir / "kbe_meta.json");
    meta << kbe_sidecar_json(sol);
    std::cout << "wrote " << (dir / "kbe_gamma.csv").string() << " and kbe_meta.json\n";
    return 0;
}

int cmd_run_table(const CommonOpts& opts) {
    const ExperimentConfig cfg = load(opts);
    const int threads = resolve_threads(cfg, opts);
    const std::vector<TableCell> cells = run_table(cfg, threads, &std::cout);
    const fs::path dir = out_dir(cfg);
    auto out = open_out(dir / "table.csv");
    write_table_csv(out, cells);

    if (cfg.has("sweep_j")) {
        const SdeModel model = build_model(cfg);
        const PathConfig path_cfg = build_path_config(cfg);
        const GaussianDensity rho0 = build_rho0(cfg, model);
        const double k = build_thresholds(cfg).front();
        const RareEvent event = build_event(cfg, model, k);
        const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_long("seed", 1));
        std::vector<EstimatorReport> sweep;
        for (IsMode mode : build_modes(cfg)) {
            if (mode == IsMode::CE) continue;
            const IsArtifacts art =
                prepare_is_artifacts(mode, model, event, rho0, path_cfg,
                                     build_pde_setup(cfg, model, k), build_pilot_setup(cfg),
                                     seed, threads);
            int ji = 0;
            for (double jv : cfg.get_vector("sweep_j")) {
                sweep.push_back(estimate(mode, model, event, rho0, path_cfg,
                                         static_cast<long long>(jv), seed,
                                         stream_block::kEstimate +
                                             static_cast<std::uint64_t>(64 + ji++) *
                                                 stream_block::kCell,
                                         threads, art)
                                    .report);
            }
        }
        auto sw = open_out(dir / "ci_vs_j.csv");
        write_ci_vs_j_csv(sw, sweep);
        auto gp = open_out(dir / "ci_vs_j.gp");
        gp << ci_vs_j_gnuplot("ci_vs_j.csv");
    }

    if (cfg.get_bool("densities", false)) {
        const DensityComparison d = density_comparison(cfg, threads);
        auto dc = open_out(dir / "density_comparison.csv");
        write_density_csv(dc, d);
        auto gp = open_out(dir / "density_comparison.gp");
        gp << density_gnuplot("density_comparison.csv", d.has_ce);
    }
    std::cout << "wrote " << (dir / "table.csv").string() << "\n";
    return 0;
}

int cmd_bootstrap(const CommonOpts& opts, long long b_count) {
    const ExperimentConfig cfg = load(opts);
    const int threads = resolve_threads(cfg, opts);
    const SdeModel model = build_model(cfg);
    const PathConfig path_cfg = build_path_config(cfg);
    const GaussianDensity rho0 = build_rho0(cfg, model);
    const double k = build_thresholds(cfg).front();
    const RareEvent event = build_event(cfg, model, k);
    const long long n_samples = cfg.get_long("j");
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_long("seed", 1));
    const int resamples =
        static_cast<int>(b_count > 0 ? b_count : cfg.get_long("bootstrap.b", 10000));

    std::vector<BootstrapRow> rows;
    for (IsMode mode : build_modes(cfg)) {
        EstimateResult res;
        if (mode == IsMode::CE) {
            res = ce_estimate(model, event, rho0, path_cfg, build_ce_config(cfg), n_samples,
                              seed, threads);
        } else {
            const IsArtifacts art =
                prepare_is_artifacts(mode, model, event, rho0, path_cfg,
                                     build_pde_setup(cfg, model, k), build_pilot_setup(cfg),
                                     seed, threads);
            res = estimate(mode, model, event, rho0, path_cfg, n_samples, seed,
                           stream_block::kEstimate, threads, art);
        }
        BootstrapRow row{model.name, k, mode, n_samples,
                         bootstrap_std(res.weights, resamples, seed, stream_block::kBootstrap,
                                       threads),
                         seed};
        std::cout << to_string(mode) << ": std in [" << csv_number(row.report.std_lo) << ", "
                  << csv_number(row.report.std_hi) << "]\n";
        rows.push_back(std::move(row));
    }
    const fs::path dir = out_dir(cfg);
    auto out = open_out(dir / "bootstrap.csv");
    write_bootstrap_csv(out, rows);
    std::cout << "wrote " << (dir / "bootstrap.csv").string() << "\n";
    return 0;
}

std::vector<Vector> read_observation_csv(const std::string& path, int obs_dim) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open observation file: " + path);
    std::vector<Vector> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || !(std::isdigit(static_cast<unsigned char>(line[0])) ||
                              line[0] == '-' || line[0] == '+'))
            continue;  // header or blank
        Vector y(obs_dim);
        std::istringstream ls(line);
        std::string tok;
        for (int i = 0; i < obs_dim; ++i) {
            if (!std::getline(ls, tok, ','))
                throw ConfigError("observation file row too short: " + line);
            y[i] = std::stod(tok);
        }
        rows.push_back(y);
    }
    return rows;
}

int cmd_enkf_run(const CommonOpts& opts) {
    const ExperimentConfig cfg = load(opts);
    const int threads = resolve_threads(cfg, opts);
    const SdeModel model = build_model(cfg);
    const PathConfig path_cfg = build_path_config(cfg);
    const GaussianDensity rho0 = build_rho0(cfg, model);
    const double k = build_thresholds(cfg).front();
    const RareEvent event = build_event(cfg, model, k);
    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_long("seed", 1));

    Matrix h = cfg.has("enkf.h") ? cfg.get_matrix("enkf.h")
                                 : Matrix::Identity(1, model.dim_state);
    Matrix gamma = cfg.has("enkf.gamma")
                       ? cfg.get_matrix("enkf.gamma")
                       : Matrix::Identity(h.rows(), h.rows()) * 0.1;
    const ObservationModel obs(h, gamma);

    MonitorSetup monitor;
    monitor.mode = mode_from_string(cfg.get_string("monitor.mode", "is-both"));
    monitor.n_samples = cfg.get_long("monitor.j", 100000);
    monitor.pde = build_pde_setup(cfg, model, k);
    monitor.pilot = build_pilot_setup(cfg);
    monitor.ce = build_ce_config(cfg);

    const int windows = static_cast<int>(cfg.get_long("enkf.windows", 10));
    const int p = static_cast<int>(cfg.get_long("enkf.p", 100));

    std::vector<Vector> recorded;
    const std::vector<Vector>* recorded_ptr = nullptr;
    if (cfg.has("enkf.obs")) {
        recorded = read_observation_csv(cfg.get_string("enkf.obs"),
                                        static_cast<int>(h.rows()));
        recorded_ptr = &recorded;
    }

    const std::vector<WindowRow> rows = run_filter_with_monitor(
        model, obs, event, rho0, path_cfg, windows, p, monitor, seed, threads, recorded_ptr);

    const fs::path dir = out_dir(cfg);
    auto out = open_out(dir / "enkf_windows.csv");
    write_enkf_csv(out, rows, static_cast<int>(h.rows()), model.dim_state);
    for (const auto& r : rows)
        std::cout << "window " << r.window << ": alpha=" << csv_number(r.report.alpha_hat)
                  << "\n";
    std::cout << "wrote " << (dir / "enkf_windows.csv").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rare-event probability tracking for SDEs under ensemble Kalman filtering"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string mode_flag;
    long long b_count = 0;
    CeFlags ce;

    auto* est = app.add_subcommand("estimate", "run the configured estimators once");
    add_common(est, opts);
    est->add_option("--mode", mode_flag, "single mode: mc|is-rho0|is-w|is-both|ce");
    est->add_option("--beta", ce.beta, "cross-entropy quantile level");
    est->add_option("--j1", ce.j1, "cross-entropy pilot size per level");
    est->add_option("--level-cap", ce.level_cap, "cross-entropy level cap");

    auto* kbe = app.add_subcommand("solve-kbe", "solve the backward equation and dump gamma");
    add_common(kbe, opts);

    auto* tab = app.add_subcommand("run-table", "reproduce a full threshold/mode table");
    add_common(tab, opts);

    auto* boot = app.add_subcommand("bootstrap", "bootstrap the estimator's sample std");
    add_common(boot, opts);
    boot->add_option("--b", b_count, "number of bootstrap resamples");

    auto* enkf = app.add_subcommand("enkf-run", "ensemble Kalman filter with the monitor");
    add_common(enkf, opts);

    CLI11_PARSE(app, argc, argv);

    try {
        if (est->parsed()) return cmd_estimate(opts, mode_flag, ce);
        if (kbe->parsed()) return cmd_solve_kbe(opts);
        if (tab->parsed()) return cmd_run_table(opts);
        if (boot->parsed()) return cmd_bootstrap(opts, b_count);
        if (enkf->parsed()) return cmd_enkf_run(opts);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
