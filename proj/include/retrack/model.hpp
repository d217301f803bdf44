#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>

#include "retrack/rng.hpp"

namespace retrack {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

class ModelError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// SDE  du = a(u) dt + b(u) dW  with state dimension d and noise dimension d_W.
/// Model objects are immutable after construction and safe to share across
/// concurrent path simulations.
struct SdeModel {
    using DriftFn = std::function<void(const Vector&, Vector&)>;
    using DiffusionFn = std::function<void(const Vector&, Matrix&)>;

    int dim_state = 0;
    int dim_noise = 0;
    DriftFn drift;          // writes a(x), length d
    DiffusionFn diffusion;  // writes b(x), d x d_W
    std::string name;

    // Constant-diffusion models cache the matrix so the simulation and the
    // Girsanov factors share one code path without re-evaluating b.
    bool constant_diffusion = false;
    Matrix diffusion_cache;

    Vector drift_at(const Vector& x) const {
        Vector a(dim_state);
        drift(x, a);
        return a;
    }

    Matrix diffusion_at(const Vector& x) const {
        if (constant_diffusion) return diffusion_cache;
        Matrix b(dim_state, dim_noise);
        diffusion(x, b);
        return b;
    }
};

/// Row vector P1 defining the tracked scalar P1 * u.
struct Projection {
    Vector row;

    explicit Projection(Vector r) : row(std::move(r)) {
        if (row.size() == 0 || row.norm() == 0.0)
            throw ModelError("projection row must be nonzero");
    }
};

inline double project(const Projection& p, const Vector& x) {
    if (p.row.size() != x.size())
        throw ModelError("projection/state dimension mismatch");
    return p.row.dot(x);
}

/// Gaussian density with mean vector and covariance matrix. The covariance
/// factor used for sampling is computed at construction (a factorization is
/// needed to check the positive-semidefinite invariant anyway) and shared
/// afterwards, so the object stays immutable and thread-safe.
class GaussianDensity {
public:
    GaussianDensity(Vector mean, Matrix covariance)
        : mean_(std::move(mean)), cov_(std::move(covariance)) {
        const auto d = mean_.size();
        if (cov_.rows() != d || cov_.cols() != d)
            throw ModelError("covariance shape does not match mean");
        cov_ = 0.5 * (cov_ + cov_.transpose().eval());
        Eigen::SelfAdjointEigenSolver<Matrix> es(cov_);
        const double largest = es.eigenvalues().cwiseAbs().maxCoeff();
        if (es.eigenvalues().minCoeff() < -1e-12 * std::max(largest, 1.0))
            throw ModelError("covariance is not positive semi-definite");
        Vector clipped = es.eigenvalues().cwiseMax(0.0);
        factor_ = es.eigenvectors() * clipped.cwiseSqrt().asDiagonal();
    }

    const Vector& mean() const { return mean_; }
    const Matrix& covariance() const { return cov_; }
    Eigen::Index dim() const { return mean_.size(); }

    Vector sample(RngStream& rng) const {
        Vector z(mean_.size());
        for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
        return mean_ + factor_ * z;
    }

    /// Zero-mean draw with this covariance.
    Vector sample_centered(RngStream& rng) const {
        Vector z(mean_.size());
        for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
        return factor_ * z;
    }

    /// Mean and standard deviation of the scalar marginal along p.
    std::pair<double, double> marginal(const Projection& p) const {
        const double m = p.row.dot(mean_);
        const double v = p.row.dot(cov_ * p.row);
        return {m, std::sqrt(std::max(v, 0.0))};
    }

private:
    Vector mean_;
    Matrix cov_;
    Matrix factor_;
};

/// Over-threshold event for the running maximum of P1 * u on [t_begin, t_end].
struct RareEvent {
    double threshold;
    Projection projection;
    double t_begin;
    double t_end;

    RareEvent(double k, Projection p, double t0, double t1)
        : threshold(k), projection(std::move(p)), t_begin(t0), t_end(t1) {
        if (!(t_end > t_begin)) throw ModelError("event horizon must have positive length");
    }

    double horizon_length() const { return t_end - t_begin; }
};

namespace detail {
// Double-well potential V(u) = 1/(2+4u^2) + u^2/4 and its derivative.
inline double dw_potential(double u) { return 1.0 / (2.0 + 4.0 * u * u) + 0.25 * u * u; }
inline double dw_potential_prime(double u) {
    const double q = 2.0 + 4.0 * u * u;
    return 0.5 * u - 8.0 * u / (q * q);
}
}  // namespace detail

/// 1D double-well dynamics du = -V'(u) dt + b dW.
inline SdeModel double_well_model(double b_diffusion) {
    if (!(b_diffusion > 0.0)) throw ModelError("double-well diffusion must be positive");
    SdeModel m;
    m.dim_state = 1;
    m.dim_noise = 1;
    m.name = "double-well";
    m.drift = [](const Vector& x, Vector& a) { a[0] = -detail::dw_potential_prime(x[0]); };
    m.constant_diffusion = true;
    m.diffusion_cache = Matrix::Constant(1, 1, b_diffusion);
    m.diffusion = [b_diffusion](const Vector&, Matrix& b) { b(0, 0) = b_diffusion; };
    return m;
}

/// Langevin dynamics du = v dt, dv = (-V'(u) - kappa v) dt + sqrt(2 kappa T) dW.
inline SdeModel langevin_model(double kappa, double temperature) {
    if (!(kappa > 0.0) || !(temperature > 0.0))
        throw ModelError("langevin parameters must be positive");
    SdeModel m;
    m.dim_state = 2;
    m.dim_noise = 1;
    m.name = "langevin";
    m.drift = [kappa](const Vector& x, Vector& a) {
        a[0] = x[1];
        a[1] = -detail::dw_potential_prime(x[0]) - kappa * x[1];
    };
    const double sigma = std::sqrt(2.0 * kappa * temperature);
    m.constant_diffusion = true;
    m.diffusion_cache = Matrix::Zero(2, 1);
    m.diffusion_cache(1, 0) = sigma;
    m.diffusion = [sigma](const Vector&, Matrix& b) {
        b(0, 0) = 0.0;
        b(1, 0) = sigma;
    };
    return m;
}

/// Coefficients of the six-mode Charney-deVore system. The channel ratio q
/// enters both q^2 + m^2 - 1 and the denominator q^2 + m^2 (the literature's
/// symbol b for the channel ratio is not the diffusion parameter).
struct CdvCoefficients {
    double alpha[2], beta[2], gamma[2], gamma_tilde[2], delta[2], eta;
    double u1_star = 0.95, u4_star = -0.76095, damping = 0.1;

    CdvCoefficients() {
        constexpr double q = 0.5, coriolis_beta = 1.25, orography_gamma = 0.2;
        constexpr double pi = 3.14159265358979323846;
        const double rt2 = std::sqrt(2.0);
        for (int j = 0; j < 2; ++j) {
            const double m = j + 1.0;
            const double m2 = m * m, q2 = q * q;
            alpha[j] = 8.0 * rt2 / pi * m2 / (4.0 * m2 - 1.0) * (q2 + m2 - 1.0) / (q2 + m2);
            beta[j] = coriolis_beta * q2 / (q2 + m2);
            gamma[j] = orography_gamma * rt2 * q / pi * 4.0 * m2 * m /
                       ((4.0 * m2 - 1.0) * (q2 + m2));
            gamma_tilde[j] = orography_gamma * rt2 * q / pi * 4.0 * m / (4.0 * m2 - 1.0);
            delta[j] = 64.0 * rt2 / (15.0 * pi) * (q2 - m2 + 1.0) / (q2 + m2);
        }
        eta = 16.0 * rt2 / (5.0 * pi);
    }
};

/// Six-dimensional Charney-deVore model with additive noise sqrt(2 b) on
/// every component (six independent Wiener terms, so d_W = 6).
inline SdeModel charney_devore_model(double b_diffusion) {
    if (b_diffusion < 0.0) throw ModelError("cdv diffusion must be nonnegative");
    SdeModel m;
    m.dim_state = 6;
    m.dim_noise = 6;
    m.name = "cdv";
    const CdvCoefficients c;
    m.drift = [c](const Vector& u, Vector& a) {
        const double u1 = u[0], u2 = u[1], u3 = u[2], u4 = u[3], u5 = u[4], u6 = u[5];
        a[0] = c.gamma_tilde[0] * u3 - c.damping * (u1 - c.u1_star);
        a[1] = -(c.alpha[0] * u1 - c.beta[0]) * u3 - c.damping * u2 - c.delta[0] * u4 * u6;
        a[2] = (c.alpha[0] * u1 - c.beta[0]) * u2 - c.gamma[0] * u1 - c.damping * u3 +
               c.delta[0] * u4 * u5;
        a[3] = c.gamma_tilde[1] * u6 - c.damping * (u4 - c.u4_star) +
               c.eta * (u2 * u6 - u3 * u5);
        a[4] = -(c.alpha[1] * u1 - c.beta[1]) * u6 - c.damping * u5 - c.delta[1] * u3 * u4;
        a[5] = (c.alpha[1] * u1 - c.beta[1]) * u5 - c.gamma[1] * u4 - c.damping * u6 +
               c.delta[1] * u2 * u4;
    };
    const double sigma = std::sqrt(2.0 * b_diffusion);
    m.constant_diffusion = true;
    m.diffusion_cache = sigma * Matrix::Identity(6, 6);
    m.diffusion = [sigma](const Vector&, Matrix& b) {
        b.setZero();
        b.diagonal().setConstant(sigma);
    };
    return m;
}

/// 1D constant-coefficient test model du = a dt + b dW.
inline SdeModel constant_model(double a, double b) {
    if (b < 0.0) throw ModelError("constant model diffusion must be nonnegative");
    SdeModel m;
    m.dim_state = 1;
    m.dim_noise = 1;
    m.name = "const";
    m.drift = [a](const Vector&, Vector& out) { out[0] = a; };
    m.constant_diffusion = true;
    m.diffusion_cache = Matrix::Constant(1, 1, b);
    m.diffusion = [b](const Vector&, Matrix& out) { out(0, 0) = b; };
    return m;
}

/// Natural projection for the built-in models (DW: identity, Langevin:
/// velocity component, CdV: first component).
inline Projection default_projection(const SdeModel& model) {
    Vector row = Vector::Zero(model.dim_state);
    if (model.name == "langevin") {
        row[1] = 1.0;
    } else {
        row[0] = 1.0;
    }
    return Projection(row);
}

}  // namespace retrack
