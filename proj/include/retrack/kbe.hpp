#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "retrack/model.hpp"
#include "retrack/numerics.hpp"

namespace retrack {

/// Uniform space-time grid for the backward equation on [x_min, x_max] x
/// [0, t_end], with x_max placed at the threshold.
struct Grid1D {
    double x_min = 0.0;
    double x_max = 0.0;  // threshold
    double dx = 0.0;
    double dt = 0.0;
    double t_end = 0.0;
    int nx = 0;  // number of cells; nodes are 0..nx
    int nt = 0;

    Grid1D() = default;

    Grid1D(double xmin, double xmax, double dx_, double dt_, double tend)
        : x_min(xmin), x_max(xmax), dx(dx_), dt(dt_), t_end(tend) {
        if (!(x_min < x_max)) throw NumericError("grid: x_min must lie below the threshold");
        if (!(dx > 0.0) || !(dt > 0.0) || !(t_end > 0.0))
            throw NumericError("grid: dx, dt, t_end must be positive");
        const double cells_x = (x_max - x_min) / dx;
        const double cells_t = t_end / dt;
        nx = static_cast<int>(std::lround(cells_x));
        nt = static_cast<int>(std::lround(cells_t));
        if (std::abs(cells_x - nx) > 1e-9 || std::abs(cells_t - nt) > 1e-9)
            throw NumericError("grid: domain is not an integer number of cells");
        if (nx + 1 < 8) throw NumericError("grid: need at least 8 spatial nodes");
    }

    /// Builds an aligned grid from requested values: x_min is pushed outward
    /// and dt shrunk so the threshold and t_end land exactly on nodes.
    static Grid1D make(double x_min_request, double threshold, double dx,
                       double dt_request, double t_end) {
        const int cells_x =
            static_cast<int>(std::ceil((threshold - x_min_request) / dx - 1e-9));
        const int cells_t = static_cast<int>(std::ceil(t_end / dt_request - 1e-9));
        return Grid1D(threshold - cells_x * dx, threshold, dx, t_end / cells_t, t_end);
    }

    double x(int i) const { return x_min + i * dx; }
    double t(int m) const { return m * dt; }
};

/// Scalar drift/diffusion pair (y, t) -> value for the one-dimensional
/// backward equation; produced either directly from a 1D model or from the
/// regression surrogate.
struct Coefficients1D {
    std::function<double(double, double)> drift;
    std::function<double(double, double)> diffusion;
};

/// Exact y-space coefficients for a one-dimensional model under projection
/// row [c]: y = c x evolves with drift c a(y/c) and diffusion |c| b(y/c).
inline Coefficients1D coefficients_from_model_1d(const SdeModel& model,
                                                 const Projection& p) {
    if (model.dim_state != 1)
        throw ModelError("direct 1d coefficients need a one-dimensional model");
    const double c = p.row[0];
    auto drift_fn = model.drift;
    auto diff = model.diffusion;
    Coefficients1D out;
    out.drift = [drift_fn, c](double y, double) {
        Vector x(1), a(1);
        x[0] = y / c;
        drift_fn(x, a);
        return c * a[0];
    };
    out.diffusion = [diff, c](double y, double) {
        Vector x(1);
        Matrix b(1, 1);
        x[0] = y / c;
        diff(x, b);
        return std::abs(c) * b(0, 0);
    };
    return out;
}

/// Closed-form solution of the constant-coefficient problem
///   gamma_t = -a gamma_x - (b^2/2) gamma_xx,  gamma(x,T)=0 (x<K),
///   gamma(K,t)=1, gamma -> 0 as x -> -inf.
/// The exponential prefactor of the second erfc term can overflow where the
/// erfc itself underflows; that product is evaluated in log space.
inline double gamma_const(double a, double b, double k, double x, double t,
                          double t_end) {
    if (!(b > 0.0)) throw NumericError("gamma_const: diffusion must be positive");
    if (!(t < t_end)) throw NumericError("gamma_const: needs t < t_end");
    const double tau = t_end - t;
    const double s = std::abs(b) * std::sqrt(2.0 * tau);
    const double rm = (k - x - a * tau) / s;
    const double rp = (k - x + a * tau) / s;
    const double c = 2.0 * a * (k - x) / (b * b);
    const double first = 0.5 * std::erfc(rm);
    const double second_log = c + log_erfc(rp) + std::log(0.5);
    const double second = second_log < -745.0 ? 0.0 : std::exp(second_log);
    const double value = first + second;
    return value < 0.0 ? 0.0 : (value > 1.0 ? 1.0 : value);
}

/// Control b * d(log gamma_const)/dx for the frozen-coefficient solution,
/// evaluated stably in log space. Where the signed sum degenerates (deep
/// underflow of gamma_fr) the asymptotic control (K-x)/(b(T-t)) - a is
/// returned instead.
inline double xi_frozen(double a_k, double b_k, double k, double x, double t,
                        double t_end) {
    if (!(t < t_end)) throw NumericError("xi_frozen: needs t < t_end");
    const double tau = t_end - t;
    const double asymptotic = (k - x) / (b_k * tau) - a_k;
    const double s = std::abs(b_k) * std::sqrt(2.0 * tau);
    const double rm = (k - x - a_k * tau) / s;
    const double rp = (k - x + a_k * tau) / s;
    const double c = 2.0 * a_k * (k - x) / (b_k * b_k);

    const double log_half = std::log(0.5);
    const double gamma_log =
        log_sum_exp(log_half + log_erfc(rm), log_half + c + log_erfc(rp));

    const double log_norm = std::log(std::abs(b_k) * std::sqrt(2.0 * 3.14159265358979323846 * tau));
    const double pos = log_sum_exp(-rm * rm - log_norm, c - rp * rp - log_norm);

    double deriv_log;
    if (a_k == 0.0) {
        deriv_log = pos;
    } else {
        const double t3 = std::log(std::abs(a_k) / (b_k * b_k)) + c + log_erfc(rp);
        if (a_k < 0.0) {
            deriv_log = log_sum_exp(pos, t3);
        } else {
            if (t3 >= pos - 1e-12) return asymptotic;
            deriv_log = pos + std::log1p(-std::exp(t3 - pos));
        }
    }
    const double xi = b_k * std::exp(deriv_log - gamma_log);
    return std::isfinite(xi) ? xi : asymptotic;
}

/// Space-time field of exit probabilities gamma on a Grid1D, stored row per
/// time level. gamma(threshold, t) = 1 for t < T; the terminal slice is zero
/// left of the threshold. Immutable after the solve.
struct KbeSolution {
    Grid1D grid;
    std::vector<double> gamma;  // (nt+1) rows of (nx+1) nodes
    double threshold = 0.0;
    double patch_dx = 0.0;
    double patch_dt = 0.0;
    double gamma_raw_min = 0.0;  // extrema before clamping to [0, 1]
    double gamma_raw_max = 0.0;

    double at(int m, int i) const { return gamma[static_cast<std::size_t>(m) * (grid.nx + 1) + i]; }
    double& at(int m, int i) { return gamma[static_cast<std::size_t>(m) * (grid.nx + 1) + i]; }

    /// Bilinear interpolation, clamped to the grid.
    double value(double y, double t) const {
        double ti = (t - 0.0) / grid.dt;
        double xi = (y - grid.x_min) / grid.dx;
        ti = std::min(std::max(ti, 0.0), static_cast<double>(grid.nt));
        xi = std::min(std::max(xi, 0.0), static_cast<double>(grid.nx));
        const int m0 = std::min(static_cast<int>(ti), grid.nt - 1);
        const int i0 = std::min(static_cast<int>(xi), grid.nx - 1);
        const double ft = ti - m0, fx = xi - i0;
        return at(m0, i0) * (1 - ft) * (1 - fx) + at(m0 + 1, i0) * ft * (1 - fx) +
               at(m0, i0 + 1) * (1 - ft) * fx + at(m0 + 1, i0 + 1) * ft * fx;
    }
};

namespace detail {

/// One Crank-Nicolson step backward in time on nodes lo..hi of the full grid.
/// Node hi carries a Dirichlet value, node lo is closed by the zero
/// second-difference extrapolation g[lo] = 2 g[lo+1] - g[lo+2] (eliminated
/// into the first interior row to keep the system tridiagonal).
struct CnWorkspace {
    std::vector<double> sub, dia, sup, rhs, cprime, dprime, a_new, a_old, b2_new, b2_old;
};

inline void cn_step(const Grid1D& grid, const Coefficients1D& coeffs, int lo, int hi,
                    double t_new, double t_old, double right_bc_new,
                    const double* g_old, double* g_new, CnWorkspace& ws) {
    const int n = hi - lo + 1;
    const double dx = grid.dx;
    const double ds = t_old - t_new;  // marching toward smaller t
    ws.sub.assign(n, 0.0);
    ws.dia.assign(n, 0.0);
    ws.sup.assign(n, 0.0);
    ws.rhs.assign(n, 0.0);
    ws.a_new.resize(n);
    ws.a_old.resize(n);
    ws.b2_new.resize(n);
    ws.b2_old.resize(n);
    for (int j = 0; j < n; ++j) {
        const double xj = grid.x(lo + j);
        ws.a_new[j] = coeffs.drift(xj, t_new);
        ws.a_old[j] = coeffs.drift(xj, t_old);
        const double bn = coeffs.diffusion(xj, t_new);
        const double bo = coeffs.diffusion(xj, t_old);
        ws.b2_new[j] = bn * bn;
        ws.b2_old[j] = bo * bo;
    }
    // Operator A g = a g_x + (b^2/2) g_xx; theta = 1/2 exactly:
    // (I - ds/2 A_new) g_new = (I + ds/2 A_old) g_old.
    for (int j = 1; j < n - 1; ++j) {
        const double lo_n = -ws.a_new[j] / (2 * dx) + ws.b2_new[j] / (2 * dx * dx);
        const double di_n = -ws.b2_new[j] / (dx * dx);
        const double hi_n = ws.a_new[j] / (2 * dx) + ws.b2_new[j] / (2 * dx * dx);
        const double lo_o = -ws.a_old[j] / (2 * dx) + ws.b2_old[j] / (2 * dx * dx);
        const double di_o = -ws.b2_old[j] / (dx * dx);
        const double hi_o = ws.a_old[j] / (2 * dx) + ws.b2_old[j] / (2 * dx * dx);
        ws.sub[j] = -0.5 * ds * lo_n;
        ws.dia[j] = 1.0 - 0.5 * ds * di_n;
        ws.sup[j] = -0.5 * ds * hi_n;
        ws.rhs[j] = g_old[j] + 0.5 * ds * (lo_o * g_old[j - 1] + di_o * g_old[j] + hi_o * g_old[j + 1]);
    }
    // Right Dirichlet value folded into the last interior row.
    ws.rhs[n - 2] -= ws.sup[n - 2] * right_bc_new;
    // Left extrapolation g0 = 2 g1 - g2 eliminated into row 1.
    ws.dia[1] += 2.0 * ws.sub[1];
    ws.sup[1] -= ws.sub[1];
    ws.sub[1] = 0.0;

    // Thomas solve over rows 1..n-2.
    ws.cprime.assign(n, 0.0);
    ws.dprime.assign(n, 0.0);
    if (ws.dia[1] == 0.0) throw NumericError("kbe: tridiagonal solve failed (zero pivot)");
    ws.cprime[1] = ws.sup[1] / ws.dia[1];
    ws.dprime[1] = ws.rhs[1] / ws.dia[1];
    for (int j = 2; j < n - 1; ++j) {
        const double denom = ws.dia[j] - ws.sub[j] * ws.cprime[j - 1];
        if (denom == 0.0) throw NumericError("kbe: tridiagonal solve failed (zero pivot)");
        ws.cprime[j] = ws.sup[j] / denom;
        ws.dprime[j] = (ws.rhs[j] - ws.sub[j] * ws.dprime[j - 1]) / denom;
    }
    g_new[n - 1] = right_bc_new;
    g_new[n - 2] = ws.dprime[n - 2];
    for (int j = n - 3; j >= 1; --j) g_new[j] = ws.dprime[j] - ws.cprime[j] * g_new[j + 1];
    g_new[0] = 2.0 * g_new[1] - g_new[2];
}

}  // namespace detail

/// Backward solve with the frozen-coefficient corner treatment. The domain
/// splits into three regions around the data discontinuity at (K, T):
///   I   [K - patch_dx, K] x [T - patch_dt, T]: closed-form gamma_fr with
///       coefficients frozen at (K, T);
///   II  [x_min, K - patch_dx] x [T - patch_dt, T]: Crank-Nicolson, right
///       boundary read from gamma_fr, terminal data zero;
///   III [x_min, K] x [0, T - patch_dt]: Crank-Nicolson on the full width,
///       terminal data patched from I and II, gamma(K, .) = 1.
inline KbeSolution solve_kbe(const Coefficients1D& coeffs, double k, const Grid1D& grid,
                             double patch_dx, double patch_dt) {
    if (std::abs(grid.x_max - k) > 1e-12)
        throw NumericError("solve_kbe: grid must end at the threshold");
    const int px = static_cast<int>(std::lround(patch_dx / grid.dx));
    const int pt = static_cast<int>(std::lround(patch_dt / grid.dt));
    if (std::abs(px * grid.dx - patch_dx) > 1e-9 || std::abs(pt * grid.dt - patch_dt) > 1e-9)
        throw NumericError("solve_kbe: patch sizes must be node multiples");
    if (px < 1 || pt < 1 || px >= grid.nx - 2 || pt >= grid.nt)
        throw NumericError("solve_kbe: patch does not fit inside the domain");

    KbeSolution sol;
    sol.grid = grid;
    sol.threshold = k;
    sol.patch_dx = px * grid.dx;
    sol.patch_dt = pt * grid.dt;
    sol.gamma.assign(static_cast<std::size_t>(grid.nt + 1) * (grid.nx + 1), 0.0);

    const double a_k = coeffs.drift(k, grid.t_end);
    const double b_k = coeffs.diffusion(k, grid.t_end);
    if (!(b_k > 0.0)) throw NumericError("solve_kbe: frozen diffusion must be positive");

    // Terminal slice: zero left of the threshold, one at it.
    sol.at(grid.nt, grid.nx) = 1.0;

    // Region I.
    for (int m = grid.nt - pt; m < grid.nt; ++m) {
        for (int i = grid.nx - px; i < grid.nx; ++i)
            sol.at(m, i) = gamma_const(a_k, b_k, k, grid.x(i), grid.t(m), grid.t_end);
        sol.at(m, grid.nx) = 1.0;
    }

    detail::CnWorkspace ws;
    std::vector<double> row_new(grid.nx + 1);

    // Region II: march the left part of the patch rows.
    for (int m = grid.nt - 1; m >= grid.nt - pt; --m) {
        const double right =
            gamma_const(a_k, b_k, k, grid.x(grid.nx - px), grid.t(m), grid.t_end);
        detail::cn_step(grid, coeffs, 0, grid.nx - px, grid.t(m), grid.t(m + 1), right,
                        &sol.at(m + 1, 0), row_new.data(), ws);
        for (int i = 0; i < grid.nx - px; ++i) sol.at(m, i) = row_new[i];
        // Shared column stays exactly the region-I value.
        sol.at(m, grid.nx - px) = gamma_const(a_k, b_k, k, grid.x(grid.nx - px), grid.t(m), grid.t_end);
    }

    // Region III: full width below the patch.
    for (int m = grid.nt - pt - 1; m >= 0; --m) {
        detail::cn_step(grid, coeffs, 0, grid.nx, grid.t(m), grid.t(m + 1), 1.0,
                        &sol.at(m + 1, 0), row_new.data(), ws);
        for (int i = 0; i <= grid.nx; ++i) sol.at(m, i) = row_new[i];
    }

    sol.gamma_raw_min = sol.gamma[0];
    sol.gamma_raw_max = sol.gamma[0];
    for (double& g : sol.gamma) {
        sol.gamma_raw_min = std::min(sol.gamma_raw_min, g);
        sol.gamma_raw_max = std::max(sol.gamma_raw_max, g);
        g = std::min(std::max(g, 0.0), 1.0);
    }
    return sol;
}

/// d_W-valued control field xi(x, t), evaluated per simulation step.
class ControlField {
public:
    using Fn = std::function<void(const Vector&, double, Vector&)>;

    ControlField() = default;
    ControlField(int dim_noise, Fn fn)
        : dim_noise_(dim_noise), fn_(std::move(fn)),
          clamp_count_(std::make_shared<std::atomic<std::uint64_t>>(0)) {}
    ControlField(int dim_noise, Fn fn, std::shared_ptr<std::atomic<std::uint64_t>> counter)
        : dim_noise_(dim_noise), fn_(std::move(fn)), clamp_count_(std::move(counter)) {}

    int dim_noise() const { return dim_noise_; }
    bool valid() const { return static_cast<bool>(fn_); }
    void eval(const Vector& x, double t, Vector& out) const { fn_(x, t, out); }

    std::uint64_t clamp_count() const { return clamp_count_ ? clamp_count_->load() : 0; }
    void count_clamp() const {
        if (clamp_count_) clamp_count_->fetch_add(1, std::memory_order_relaxed);
    }

private:
    int dim_noise_ = 0;
    Fn fn_;
    std::shared_ptr<std::atomic<std::uint64_t>> clamp_count_;
};

/// Optimal control xi(x,t) = b(x)^T P1^T dlog(gamma)/dy evaluated from the
/// solved field: central differences of log gamma on the grid (one-sided at
/// the edges), bilinear interpolation between nodes, gamma floored at 1e-300
/// inside the log. Queries outside the grid clamp to the nearest node and
/// bump the field's diagnostic counter.
inline ControlField control_from_gamma(const KbeSolution& sol, const SdeModel& model,
                                       const Projection& p) {
    const Grid1D grid = sol.grid;
    const int nx = grid.nx, nt = grid.nt;
    auto table = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(nt + 1) * (nx + 1));
    std::vector<double> logs(static_cast<std::size_t>(nt + 1) * (nx + 1));
    for (std::size_t idx = 0; idx < logs.size(); ++idx)
        logs[idx] = std::log(std::max(sol.gamma[idx], 1e-300));
    auto lg = [&](int m, int i) { return logs[static_cast<std::size_t>(m) * (nx + 1) + i]; };
    for (int m = 0; m <= nt; ++m) {
        for (int i = 0; i <= nx; ++i) {
            double d;
            if (i == 0)
                d = (lg(m, 1) - lg(m, 0)) / grid.dx;
            else if (i == nx)
                d = (lg(m, nx) - lg(m, nx - 1)) / grid.dx;
            else
                d = (lg(m, i + 1) - lg(m, i - 1)) / (2.0 * grid.dx);
            (*table)[static_cast<std::size_t>(m) * (nx + 1) + i] = d;
        }
    }

    const bool const_diff = model.constant_diffusion;
    Vector bp1_const;
    if (const_diff) bp1_const = model.diffusion_cache.transpose() * p.row;
    auto diffusion = model.diffusion;
    const int d_state = model.dim_state;
    const int d_noise = model.dim_noise;
    Vector prow = p.row;

    auto counter = std::make_shared<std::atomic<std::uint64_t>>(0);
    ControlField::Fn fn = [table, grid, nx, nt, const_diff, bp1_const, diffusion,
                           d_state, d_noise, prow, counter](const Vector& x, double t,
                                                            Vector& out) {
        const double y = prow.dot(x);
        double ti = t / grid.dt;
        double xi = (y - grid.x_min) / grid.dx;
        if (ti < 0.0 || ti > nt || xi < 0.0 || xi > nx)
            counter->fetch_add(1, std::memory_order_relaxed);
        ti = std::min(std::max(ti, 0.0), static_cast<double>(nt));
        xi = std::min(std::max(xi, 0.0), static_cast<double>(nx));
        const int m0 = std::min(static_cast<int>(ti), nt - 1);
        const int i0 = std::min(static_cast<int>(xi), nx - 1);
        const double ft = ti - m0, fx = xi - i0;
        const auto* tab = table->data();
        const std::size_t r0 = static_cast<std::size_t>(m0) * (nx + 1) + i0;
        const std::size_t r1 = r0 + (nx + 1);
        const double g = tab[r0] * (1 - ft) * (1 - fx) + tab[r1] * ft * (1 - fx) +
                         tab[r0 + 1] * (1 - ft) * fx + tab[r1 + 1] * ft * fx;
        if (const_diff) {
            out = bp1_const * g;
        } else {
            Matrix b(d_state, d_noise);
            diffusion(x, b);
            out.noalias() = (b.transpose() * prow) * g;
        }
    };
    return ControlField(model.dim_noise, std::move(fn), counter);
}

}  // namespace retrack
