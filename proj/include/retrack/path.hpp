#pragma once

#include <cmath>
#include <limits>
#include <utility>

#include "retrack/kbe.hpp"
#include "retrack/model.hpp"
#include "retrack/rng.hpp"

namespace retrack {

/// Time-stepping parameters for one observation window rebased to [0, T].
struct PathConfig {
    double dt = 0.01;               // uniform Euler-Maruyama step T/K
    double horizon_end = 1.0;       // T
    double delta_t_switch = 0.1;    // control switched to the asymptotic form on (T - dt_switch, T]
    double epsilon_min_step = 1e-6; // adaptive loop stops once h falls below this
    bool bridge_enabled = true;

    void validate() const {
        if (!(horizon_end > 0.0)) throw NumericError("path config: horizon must be positive");
        if (!(dt > 0.0) || !(dt < horizon_end))
            throw NumericError("path config: need 0 < dt < horizon");
        if (!(epsilon_min_step > 0.0) || !(epsilon_min_step < dt))
            throw NumericError("path config: need 0 < epsilon < dt");
        const double ratio = delta_t_switch / dt;
        if (std::abs(ratio - std::lround(ratio)) > 1e-9)
            throw NumericError("path config: delta_t_switch must be a multiple of dt");
    }
};

struct PathOutcome {
    bool hit = false;
    double stopping_time = 0.0;
    double log_likelihood_w = 0.0;
    Vector terminal_state;
    int steps_taken = 0;
    double projected_max = -std::numeric_limits<double>::infinity();
    bool failed = false;  // non-finite state encountered; excluded by callers
};

/// One Euler-Maruyama step x + a(x) h + b(x) xi h + b(x) dW. The control
/// value may be empty (size 0) for the uncontrolled scheme.
inline Vector em_step(const SdeModel& model, const Vector& state, const Vector& control_value,
                      double h, const Vector& noise) {
    Vector a(model.dim_state);
    model.drift(state, a);
    Vector next = state + a * h;
    const Matrix& b = model.constant_diffusion ? model.diffusion_cache
                                               : model.diffusion_at(state);
    if (control_value.size() > 0)
        next.noalias() += b * (control_value * h + noise);
    else
        next.noalias() += b * noise;
    return next;
}

/// Exit probability of the Brownian bridge between two nodes against the
/// threshold, with the projected diffusion frozen at the left node:
/// q = exp(-2 max(K - P1 x_k, 0) max(K - P1 x_{k+1}, 0) / ((P1 b b^T P1^T)(x_k) h)).
/// Returns 1 as soon as either endpoint is at or above the threshold.
inline double bridge_exit_probability(const SdeModel& model, const Projection& p,
                                      double k_threshold, const Vector& x_k,
                                      const Vector& x_k1, double h) {
    if (!(h > 0.0)) throw NumericError("bridge: step must be positive");
    const double d0 = k_threshold - project(p, x_k);
    const double d1 = k_threshold - project(p, x_k1);
    if (d0 <= 0.0 || d1 <= 0.0) return 1.0;
    const Matrix b = model.diffusion_at(x_k);
    const Vector bt_p = b.transpose() * p.row;
    const double var = bt_p.squaredNorm();
    if (!(var > 0.0)) throw NumericError("bridge: projected diffusion vanishes");
    const double expo = -2.0 * d0 * d1 / (var * h);
    return expo < -745.0 ? 0.0 : std::exp(expo);
}

/// Simulates one (possibly controlled) path over [0, T] with the adaptive
/// rule h = min(dt, (T - t)/2) and the per-step Brownian-bridge hitting test.
/// The Girsanov log-likelihood accumulates -xi . dW - |xi|^2 h / 2 per
/// executed step using the noise actually drawn; with no control the
/// likelihood is exactly zero. A bridge hit stops the path at t + h/2;
/// paths that run the step size below epsilon without hitting are classified
/// not-hit at time T. Non-finite states mark the outcome failed instead of
/// throwing.
inline PathOutcome simulate_path(const SdeModel& model, const RareEvent& event,
                                 const Vector& x0, const ControlField* control,
                                 const PathConfig& cfg, RngStream& rng) {
    const double T = cfg.horizon_end;
    const double k = event.threshold;
    const Projection& p = event.projection;

    PathOutcome out;
    out.terminal_state = x0;
    double y = project(p, x0);
    out.projected_max = y;
    if (y >= k) {  // immediate hit: indicator true, tau = t_n, no likelihood
        out.hit = true;
        out.stopping_time = 0.0;
        return out;
    }

    Vector x = x0;
    Vector a(model.dim_state);
    Vector xi(model.dim_noise);
    Vector noise(model.dim_noise);
    Vector x_next(model.dim_state);
    Vector prow_b;  // scratch for the bridge variance under non-constant diffusion
    double bridge_var_const = 0.0;
    if (model.constant_diffusion) {
        const Vector bt_p = model.diffusion_cache.transpose() * p.row;
        bridge_var_const = bt_p.squaredNorm();
    }

    double t = 0.0;
    double h = cfg.dt;
    const bool controlled = control != nullptr && control->valid();

    while (t <= T && y < k && h > cfg.epsilon_min_step) {
        h = std::min(cfg.dt, (T - t) / 2.0);
        if (!(h > cfg.epsilon_min_step)) break;

        for (int j = 0; j < model.dim_noise; ++j) noise[j] = rng.normal() * std::sqrt(h);

        model.drift(x, a);
        x_next = x + a * h;
        const Matrix& b = model.constant_diffusion ? model.diffusion_cache
                                                   : model.diffusion_at(x);
        if (controlled) {
            control->eval(x, t, xi);
            x_next.noalias() += b * (xi * h + noise);
            out.log_likelihood_w += -xi.dot(noise) - 0.5 * xi.squaredNorm() * h;
        } else {
            x_next.noalias() += b * noise;
        }
        ++out.steps_taken;

        if (!x_next.allFinite()) {
            out.failed = true;
            out.terminal_state = x_next;
            out.stopping_time = T;
            return out;
        }

        const double y_next = project(p, x_next);
        out.projected_max = std::max(out.projected_max, y_next);

        if (cfg.bridge_enabled) {
            bool hit_now = false;
            if (y_next >= k) {
                hit_now = true;  // q = 1, any uniform draw is below it
            } else {
                const double var = model.constant_diffusion
                                       ? bridge_var_const
                                       : (model.diffusion_at(x).transpose() * p.row).squaredNorm();
                if (var > 0.0) {
                    const double expo = -2.0 * (k - y) * (k - y_next) / (var * h);
                    const double q = expo < -745.0 ? 0.0 : std::exp(expo);
                    if (q > 0.0 && rng.uniform() < q) hit_now = true;
                }
            }
            if (hit_now) {
                out.hit = true;
                out.stopping_time = t + 0.5 * h;
                out.projected_max = std::max(out.projected_max, k);
                out.terminal_state = x_next;
                return out;
            }
        } else if (y_next >= k) {
            out.hit = true;
            out.stopping_time = t + h;
            out.terminal_state = x_next;
            return out;
        }

        t += h;
        x = x_next;
        y = y_next;
    }

    out.hit = false;
    out.stopping_time = T;
    out.terminal_state = x;
    return out;
}

/// Asymptotic control field: the scalar PDE control
/// xi_inf(y, t) = (K - y)/(b_surr(y,t) (T - t)) - a_surr(y, t)
/// mapped to the noise dimensions through b(x)^T P1^T / b_surr, so the 1D
/// identity-projection case reduces to the scalar formula exactly.
inline ControlField asymptotic_control(const SdeModel& model, const Projection& p,
                                       const Coefficients1D& coeffs, double k_threshold,
                                       double t_end) {
    const bool const_diff = model.constant_diffusion;
    Vector bp1_const;
    if (const_diff) bp1_const = model.diffusion_cache.transpose() * p.row;
    auto diffusion = model.diffusion;
    const int d_state = model.dim_state;
    const int d_noise = model.dim_noise;
    Vector prow = p.row;
    auto cf = coeffs;
    ControlField::Fn fn = [cf, k_threshold, t_end, const_diff, bp1_const, diffusion,
                           d_state, d_noise, prow](const Vector& x, double t, Vector& out) {
        const double y = prow.dot(x);
        const double tau = std::max(t_end - t, 1e-300);
        const double b_s = cf.diffusion(y, t);
        const double a_s = cf.drift(y, t);
        const double xi_scalar = (k_threshold - y) / (b_s * tau) - a_s;
        const double g = xi_scalar / b_s;  // dlog(gamma)/dy in the asymptotic regime
        if (const_diff) {
            out = bp1_const * g;
        } else {
            Matrix b(d_state, d_noise);
            diffusion(x, b);
            out.noalias() = (b.transpose() * prow) * g;
        }
    };
    return ControlField(model.dim_noise, std::move(fn));
}

/// Switches between the PDE control (t <= T - delta_t) and the asymptotic
/// control (t > T - delta_t), which stays well-behaved as the PDE control's
/// log-gradient steepens toward the terminal corner.
inline ControlField control_with_switch(ControlField pde_control,
                                        ControlField asymptotic, double t_end,
                                        double delta_t_switch) {
    const double t_switch = t_end - delta_t_switch;
    const int d_noise = pde_control.dim_noise();
    auto pde = std::make_shared<ControlField>(std::move(pde_control));
    auto asy = std::make_shared<ControlField>(std::move(asymptotic));
    ControlField::Fn fn = [pde, asy, t_switch](const Vector& x, double t, Vector& out) {
        if (t <= t_switch)
            pde->eval(x, t, out);
        else
            asy->eval(x, t, out);
    };
    return ControlField(d_noise, std::move(fn));
}

}  // namespace retrack
