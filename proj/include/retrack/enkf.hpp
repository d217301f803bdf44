#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "retrack/cross_entropy.hpp"
#include "retrack/importance.hpp"
#include "retrack/model.hpp"
#include "retrack/parallel.hpp"
#include "retrack/path.hpp"

namespace retrack {

/// Linear observation y = H u + eta, eta ~ N(0, Gamma).
struct ObservationModel {
    Matrix h;
    Matrix noise_cov;
    Matrix noise_factor;  // Cholesky factor of Gamma

    ObservationModel(Matrix h_matrix, Matrix gamma)
        : h(std::move(h_matrix)), noise_cov(std::move(gamma)) {
        if (noise_cov.rows() != h.rows() || noise_cov.cols() != h.rows())
            throw ModelError("observation noise covariance shape mismatch");
        Eigen::LLT<Matrix> llt(noise_cov);
        if (llt.info() != Eigen::Success)
            throw ModelError("observation noise covariance must be positive definite");
        noise_factor = llt.matrixL();
    }

    Vector sample_noise(RngStream& rng) const {
        Vector z(noise_cov.rows());
        for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
        return noise_factor * z;
    }
};

struct Ensemble {
    std::vector<Vector> members;
    long time_index = 0;
    long blowups = 0;  // members that lost finiteness during propagation

    int size() const { return static_cast<int>(members.size()); }
};

/// Sample mean and unbiased covariance (divisor P - 1) of the ensemble.
inline std::pair<Vector, Matrix> ensemble_stats(const Ensemble& ens) {
    const int P = ens.size();
    if (P < 2) throw ModelError("ensemble needs at least two members");
    const Eigen::Index d = ens.members[0].size();
    Vector mean = Vector::Zero(d);
    for (const auto& v : ens.members) mean += v;
    mean /= static_cast<double>(P);
    Matrix cov = Matrix::Zero(d, d);
    for (const auto& v : ens.members) {
        const Vector dv = v - mean;
        cov.noalias() += dv * dv.transpose();
    }
    cov /= static_cast<double>(P - 1);
    return {mean, cov};
}

/// Prediction step: every member advances through the numerical dynamics
/// (plain uniform Euler-Maruyama over the window, no hitting test). Members
/// that blow up keep their last finite state and are counted.
inline std::pair<Ensemble, GaussianDensity> predict(const Ensemble& ens, const SdeModel& model,
                                                    const PathConfig& cfg, std::uint64_t seed,
                                                    std::uint64_t stream_base,
                                                    int threads = 1) {
    const int P = ens.size();
    if (P < 2) throw ModelError("ensemble needs at least two members");
    const int steps = static_cast<int>(std::lround(cfg.horizon_end / cfg.dt));
    Ensemble out;
    out.members.assign(P, Vector());
    out.time_index = ens.time_index + 1;
    out.blowups = ens.blowups;
    std::vector<char> bad(P, 0);

    parallel_for(static_cast<std::size_t>(P), threads, [&](std::size_t i) {
        RngStream rng(seed, stream_base + i);
        Vector x = ens.members[i];
        Vector a(model.dim_state);
        Vector noise(model.dim_noise);
        for (int k = 0; k < steps; ++k) {
            model.drift(x, a);
            const Matrix& b = model.constant_diffusion ? model.diffusion_cache
                                                       : model.diffusion_at(x);
            for (int j = 0; j < model.dim_noise; ++j)
                noise[j] = rng.normal() * std::sqrt(cfg.dt);
            Vector next = x + a * cfg.dt;
            next.noalias() += b * noise;
            if (!next.allFinite()) {
                bad[i] = 1;
                break;
            }
            x = next;
        }
        out.members[i] = x;
    });
    for (char c : bad) out.blowups += (c != 0);

    auto [mean, cov] = ensemble_stats(out);
    return {out, GaussianDensity(mean, cov)};
}

/// Kalman gain K = C H^T (H C H^T + Gamma)^{-1}, solved rather than inverted.
inline Matrix kalman_gain(const Matrix& cov, const ObservationModel& obs) {
    const Matrix cht = cov * obs.h.transpose();
    const Matrix innovation = obs.h * cht + obs.noise_cov;
    Eigen::LLT<Matrix> llt(innovation);
    if (llt.info() != Eigen::Success)
        throw NumericError("enkf update: singular innovation matrix");
    return llt.solve(cht.transpose()).transpose();
}

/// Update step with perturbed observations:
///   K = C H^T (H C H^T + Gamma)^{-1},  v_i <- (I - K H) v_i + K (y + eta_i).
inline Ensemble update(const Ensemble& ens, const ObservationModel& obs, const Vector& y,
                       RngStream& rng) {
    auto [mean, cov] = ensemble_stats(ens);
    const Matrix gain = kalman_gain(cov, obs);

    Ensemble out;
    out.time_index = ens.time_index;
    out.blowups = ens.blowups;
    out.members.reserve(ens.members.size());
    for (const auto& v : ens.members) {
        const Vector y_pert = y + obs.sample_noise(rng);
        out.members.push_back(v + gain * (y_pert - obs.h * v));
    }
    return out;
}

struct MonitorSetup {
    IsMode mode = IsMode::IS_BOTH;
    long long n_samples = 100000;  // auxiliary ensemble size, independent of P
    PdeSetup pde;
    PilotSetup pilot;
    CeConfig ce;
};

struct WindowRow {
    int window = 0;
    Vector observation;  // empty on the initial window (nothing assimilated yet)
    Vector filter_mean;
    EstimatorReport report;
};

/// EnKF loop with the per-window rare-event monitor. Window 0 runs the
/// monitor on the configured initial density before any data assimilation;
/// window n >= 1 assimilates y_n first, fits a Gaussian to the updated
/// ensemble (covariance regularized by 1e-10 trace/d on the diagonal), runs
/// the monitor from it, and then advances the main ensemble. A synthetic
/// truth path generates the observations unless a pre-recorded sequence is
/// supplied.
inline std::vector<WindowRow> run_filter_with_monitor(
    const SdeModel& model, const ObservationModel& obs, const RareEvent& event,
    const GaussianDensity& rho0, const PathConfig& cfg, int windows, int ensemble_size,
    const MonitorSetup& monitor, std::uint64_t seed, int threads = 1,
    const std::vector<Vector>* recorded_observations = nullptr) {
    if (windows < 1) throw ModelError("enkf run needs at least one window");
    if (ensemble_size < 2) throw ModelError("ensemble needs at least two members");

    RngStream init_rng(seed, stream_block::kEnkf);
    Ensemble ens;
    ens.members.reserve(ensemble_size);
    for (int i = 0; i < ensemble_size; ++i) ens.members.push_back(rho0.sample(init_rng));

    RngStream truth_rng(seed, stream_block::kSignal);
    RngStream perturb_rng(seed, stream_block::kSignal + 1);
    Vector truth = rho0.sample(truth_rng);
    const int steps = static_cast<int>(std::lround(cfg.horizon_end / cfg.dt));

    auto advance_truth = [&](Vector x) {
        Vector a(model.dim_state);
        Vector noise(model.dim_noise);
        for (int k = 0; k < steps; ++k) {
            model.drift(x, a);
            const Matrix& b = model.constant_diffusion ? model.diffusion_cache
                                                       : model.diffusion_at(x);
            for (int j = 0; j < model.dim_noise; ++j)
                noise[j] = truth_rng.normal() * std::sqrt(cfg.dt);
            x += a * cfg.dt;
            x.noalias() += b * noise;
        }
        return x;
    };

    std::vector<WindowRow> rows;
    Vector pending_obs;  // observation for the NEXT window
    for (int n = 0; n < windows; ++n) {
        WindowRow row;
        row.window = n;
        std::optional<GaussianDensity> density;
        if (n == 0) {
            density = rho0;
        } else {
            if (recorded_observations) {
                if (static_cast<std::size_t>(n - 1) >= recorded_observations->size())
                    throw NumericError("enkf run: observation file shorter than the window count");
                row.observation = (*recorded_observations)[n - 1];
            } else {
                row.observation = pending_obs;
            }
            ens = update(ens, obs, row.observation, perturb_rng);
            auto [mean, cov] = ensemble_stats(ens);
            const double reg = 1e-10 * cov.trace() / static_cast<double>(cov.rows());
            cov.diagonal().array() += reg;
            density.emplace(mean, cov);
        }
        row.filter_mean = density->mean();

        const std::uint64_t cell =
            stream_block::kEstimate + static_cast<std::uint64_t>(n) * stream_block::kCell;
        if (monitor.mode == IsMode::CE) {
            row.report = ce_estimate(model, event, *density, cfg, monitor.ce,
                                     monitor.n_samples, seed + 1000u + n, threads)
                             .report;
        } else {
            const IsArtifacts art =
                prepare_is_artifacts(monitor.mode, model, event, *density, cfg, monitor.pde,
                                     monitor.pilot, seed + 1000u + n, threads);
            row.report = estimate(monitor.mode, model, event, *density, cfg,
                                  monitor.n_samples, seed, cell, threads, art)
                             .report;
        }
        rows.push_back(std::move(row));

        if (n + 1 < windows) {
            auto [next, stats] = predict(ens, model, cfg, seed,
                                         stream_block::kEnkf +
                                             static_cast<std::uint64_t>(n + 1) *
                                                 stream_block::kCell,
                                         threads);
            ens = std::move(next);
            truth = advance_truth(truth);
            pending_obs = obs.h * truth + obs.sample_noise(perturb_rng);
        }
    }
    return rows;
}

}  // namespace retrack
