#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "retrack/kbe.hpp"
#include "retrack/model.hpp"
#include "retrack/parallel.hpp"
#include "retrack/path.hpp"

namespace retrack {

/// Tensor-product bivariate monomial basis psi_p(t, s) = t^p1 s^p2 with
/// p1, p2 <= max_degree; |Lambda| = (max_degree + 1)^2.
struct BasisSpec {
    int max_degree = 2;

    int size() const { return (max_degree + 1) * (max_degree + 1); }

    void monomials(double t, double s, double* out) const {
        double tp = 1.0;
        int idx = 0;
        for (int p1 = 0; p1 <= max_degree; ++p1) {
            double sp = 1.0;
            for (int p2 = 0; p2 <= max_degree; ++p2) {
                out[idx++] = tp * sp;
                sp *= s;
            }
            tp *= t;
        }
    }
};

/// Pilot-ensemble snapshots: one row per (path, step-start) with the
/// projected state and the two regression targets.
struct RegressionSample {
    std::vector<double> times;
    std::vector<double> projected_states;
    std::vector<double> drift_targets;      // P1 a(u)
    std::vector<double> diffusion_targets;  // (P1 b b^T P1^T)(u)
    int skipped_paths = 0;

    std::size_t size() const { return times.size(); }
};

/// Simulates M pilot paths with plain uniform Euler-Maruyama under the
/// original measure (zero control, no bridge) and records the regression
/// data at every step start t_{n,k}. Paths that lose finiteness are skipped
/// whole and counted.
inline RegressionSample generate_regression_data(const SdeModel& model, const Projection& p,
                                                 const GaussianDensity& initial, int n_paths,
                                                 const PathConfig& cfg, std::uint64_t seed,
                                                 std::uint64_t stream_base, int threads = 1) {
    if (n_paths < 2) throw NumericError("pilot ensemble needs at least two paths");
    const int steps = static_cast<int>(std::lround(cfg.horizon_end / cfg.dt));
    const std::size_t rows = static_cast<std::size_t>(n_paths) * steps;
    RegressionSample sample;
    sample.times.assign(rows, 0.0);
    sample.projected_states.assign(rows, 0.0);
    sample.drift_targets.assign(rows, 0.0);
    sample.diffusion_targets.assign(rows, 0.0);
    std::vector<char> ok(n_paths, 1);

    parallel_for(static_cast<std::size_t>(n_paths), threads, [&](std::size_t i) {
        RngStream rng(seed, stream_base + i);
        Vector x = initial.sample(rng);
        Vector a(model.dim_state);
        Vector noise(model.dim_noise);
        const std::size_t row0 = i * steps;
        for (int k = 0; k < steps; ++k) {
            if (!x.allFinite()) {
                ok[i] = 0;
                return;
            }
            const double t = k * cfg.dt;
            model.drift(x, a);
            const Matrix& b = model.constant_diffusion ? model.diffusion_cache
                                                       : model.diffusion_at(x);
            const Vector bt_p = b.transpose() * p.row;
            sample.times[row0 + k] = t;
            sample.projected_states[row0 + k] = p.row.dot(x);
            sample.drift_targets[row0 + k] = p.row.dot(a);
            sample.diffusion_targets[row0 + k] = bt_p.squaredNorm();
            for (int j = 0; j < model.dim_noise; ++j)
                noise[j] = rng.normal() * std::sqrt(cfg.dt);
            x += a * cfg.dt;
            x.noalias() += b * noise;
        }
    });

    // Compact out failed paths.
    int n_bad = 0;
    for (char c : ok) n_bad += (c == 0);
    if (n_bad > 0) {
        RegressionSample kept;
        kept.skipped_paths = n_bad;
        kept.times.reserve(rows);
        for (int i = 0; i < n_paths; ++i) {
            if (!ok[i]) continue;
            const std::size_t row0 = static_cast<std::size_t>(i) * steps;
            for (int k = 0; k < steps; ++k) {
                kept.times.push_back(sample.times[row0 + k]);
                kept.projected_states.push_back(sample.projected_states[row0 + k]);
                kept.drift_targets.push_back(sample.drift_targets[row0 + k]);
                kept.diffusion_targets.push_back(sample.diffusion_targets[row0 + k]);
            }
        }
        return kept;
    }
    return sample;
}

struct QrFactors {
    Matrix q;          // rows x |Lambda|, Q^T Q = I
    Matrix r_inverse;  // upper triangular, maps raw monomials to the orthonormal basis
};

/// Modified Gram-Schmidt QR of the monomial design matrix over the sample
/// points. Columns are orthonormalized in the Euclidean sense (the constant
/// basis column becomes 1/sqrt(N M) everywhere). A pivot below 1e-12 times
/// the leading one signals a rank-deficient design.
inline QrFactors orthonormalize(const RegressionSample& sample, const BasisSpec& basis) {
    const std::size_t n = sample.size();
    const int s = basis.size();
    if (n < static_cast<std::size_t>(s))
        throw NumericError("regression: sample smaller than the basis");

    Matrix q(n, s);
    std::vector<double> mono(s);
    for (std::size_t r = 0; r < n; ++r) {
        basis.monomials(sample.times[r], sample.projected_states[r], mono.data());
        for (int j = 0; j < s; ++j) q(r, j) = mono[j];
    }

    Matrix r = Matrix::Zero(s, s);
    double leading = 0.0;
    for (int j = 0; j < s; ++j) {
        for (int i = 0; i < j; ++i) {
            const double proj = q.col(i).dot(q.col(j));
            r(i, j) = proj;
            q.col(j) -= proj * q.col(i);
        }
        const double norm = q.col(j).norm();
        if (j == 0) leading = norm;
        if (!(norm > 1e-12 * leading))
            throw NumericError(
                "regression: rank-deficient design matrix; reduce the basis degree");
        r(j, j) = norm;
        q.col(j) /= norm;
    }

    QrFactors out;
    out.q = std::move(q);
    out.r_inverse = r.triangularView<Eigen::Upper>().solve(Matrix::Identity(s, s));
    return out;
}

/// Fitted surrogate drift and squared diffusion as coefficient-weighted sums
/// of the orthonormalized basis functions; b_check^2 is floored so the
/// surrogate equation keeps a uniformly positive diffusion.
struct SurrogateCoefficients {
    BasisSpec basis;
    Matrix r_inverse;
    Vector coeffs_a;
    Vector coeffs_b2;
    double b2_floor = 1e-8;

    // Monomial-space weights R^{-1} c, precomputed for evaluation.
    Vector weights_a;
    Vector weights_b2;

    double drift_value(double y, double t) const { return eval(weights_a, t, y); }

    double b2_value(double y, double t) const {
        return std::max(eval(weights_b2, t, y), b2_floor);
    }

    double diffusion_value(double y, double t) const { return std::sqrt(b2_value(y, t)); }

    Coefficients1D coefficients() const {
        const SurrogateCoefficients self = *this;
        Coefficients1D c;
        c.drift = [self](double y, double t) { return self.drift_value(y, t); };
        c.diffusion = [self](double y, double t) { return self.diffusion_value(y, t); };
        return c;
    }

private:
    double eval(const Vector& w, double t, double y) const {
        double acc = 0.0;
        double tp = 1.0;
        int idx = 0;
        for (int p1 = 0; p1 <= basis.max_degree; ++p1) {
            double sp = 1.0;
            for (int p2 = 0; p2 <= basis.max_degree; ++p2) {
                acc += w[idx++] * tp * sp;
                sp *= y;
            }
            tp *= t;
        }
        return acc;
    }

    friend SurrogateCoefficients fit_surrogate(const RegressionSample&, const BasisSpec&,
                                               double);
};

/// Least-squares fit of both targets through the orthonormalized basis; with
/// Q^T Q = I the normal equations collapse to coeffs = Q^T target.
inline SurrogateCoefficients fit_surrogate(const RegressionSample& sample,
                                           const BasisSpec& basis, double b2_floor = 1e-8) {
    QrFactors qr = orthonormalize(sample, basis);
    const std::size_t n = sample.size();
    Eigen::Map<const Vector> f(sample.drift_targets.data(), n);
    Eigen::Map<const Vector> g(sample.diffusion_targets.data(), n);

    SurrogateCoefficients out;
    out.basis = basis;
    out.r_inverse = qr.r_inverse;
    out.coeffs_a = qr.q.transpose() * f;
    out.coeffs_b2 = qr.q.transpose() * g;
    out.b2_floor = b2_floor;
    out.weights_a = out.r_inverse * out.coeffs_a;
    out.weights_b2 = out.r_inverse * out.coeffs_b2;
    return out;
}

}  // namespace retrack
