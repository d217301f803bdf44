#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "retrack/markov_projection.hpp"
#include "retrack/model.hpp"

using namespace retrack;
using Catch::Approx;

namespace {

PathConfig pilot_cfg() {
    PathConfig cfg;
    cfg.dt = 0.01;
    cfg.horizon_end = 1.0;
    cfg.delta_t_switch = 0.1;
    return cfg;
}

RegressionSample synthetic_sample(int n, std::uint64_t seed,
                                  double (*target_a)(double, double),
                                  double (*target_b2)(double, double)) {
    RegressionSample s;
    RngStream rng(seed, 0);
    for (int i = 0; i < n; ++i) {
        const double t = rng.uniform();
        const double y = 4.0 * rng.uniform() - 2.0;
        s.times.push_back(t);
        s.projected_states.push_back(y);
        s.drift_targets.push_back(target_a(t, y));
        s.diffusion_targets.push_back(target_b2(t, y));
    }
    return s;
}

}  // namespace

TEST_CASE("basis spec enumerates the tensor-product index set") {
    const BasisSpec basis{2};
    CHECK(basis.size() == 9);
    double mono[9];
    basis.monomials(2.0, 3.0, mono);
    // order: t^p1 y^p2 with p2 fastest
    CHECK(mono[0] == 1.0);
    CHECK(mono[1] == 3.0);
    CHECK(mono[2] == 9.0);
    CHECK(mono[3] == 2.0);
    CHECK(mono[8] == 4.0 * 9.0);
}

TEST_CASE("regression data on the double well records the drift exactly") {
    const SdeModel dw = double_well_model(0.5);
    Vector prow(1);
    prow << 1.0;
    const GaussianDensity rho0(Vector::Constant(1, -1.0), Matrix::Constant(1, 1, 0.04));
    const RegressionSample s = generate_regression_data(dw, Projection(prow), rho0, 50,
                                                        pilot_cfg(), 11, 0, 2);
    REQUIRE(s.size() == 50 * 100);
    CHECK(s.skipped_paths == 0);
    Vector x(1);
    for (std::size_t i = 0; i < s.size(); i += 97) {
        x[0] = s.projected_states[i];
        CHECK(s.drift_targets[i] == dw.drift_at(x)[0]);
        CHECK(s.diffusion_targets[i] == Approx(0.25).epsilon(1e-14));
    }
    CHECK_THROWS_AS(generate_regression_data(dw, Projection(prow), rho0, 1, pilot_cfg(), 11,
                                             0, 1),
                    NumericError);
}

TEST_CASE("langevin projected diffusion target is the constant 2 kappa T") {
    const double kappa = 0.3084251375340424;  // 2^-5 pi^2
    const SdeModel lan = langevin_model(kappa, 1.0);
    Vector prow(2);
    prow << 0.0, 1.0;
    const GaussianDensity rho0(Vector::Zero(2), 0.5 * Matrix::Identity(2, 2));
    const RegressionSample s = generate_regression_data(lan, Projection(prow), rho0, 20,
                                                        pilot_cfg(), 12, 0, 2);
    for (std::size_t i = 0; i < s.size(); i += 53)
        CHECK(s.diffusion_targets[i] == Approx(2.0 * kappa).epsilon(1e-14));
}

TEST_CASE("orthonormalize: constant basis column and near-identity gram matrix") {
    auto zero = [](double, double) { return 0.0; };
    const RegressionSample s = synthetic_sample(4000, 5, zero, zero);

    const QrFactors qr0 = orthonormalize(s, BasisSpec{0});
    const double expected = 1.0 / std::sqrt(4000.0);
    for (int r = 0; r < 20; ++r) CHECK(qr0.q(r, 0) == Approx(expected).epsilon(1e-12));

    const QrFactors qr = orthonormalize(s, BasisSpec{2});
    const Matrix gram = qr.q.transpose() * qr.q;
    CHECK((gram - Matrix::Identity(9, 9)).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("orthonormalize on the four-point fixture against the explicit gram matrix") {
    RegressionSample s;
    const double pts[4][2] = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
    for (auto& p : pts) {
        s.times.push_back(p[0]);
        s.projected_states.push_back(p[1]);
        s.drift_targets.push_back(0.0);
        s.diffusion_targets.push_back(0.0);
    }
    const BasisSpec basis{1};
    const QrFactors qr = orthonormalize(s, basis);

    // brute-force gram matrix of raw monomials on the four points
    Matrix psi(4, 4);
    for (int r = 0; r < 4; ++r) {
        double mono[4];
        basis.monomials(s.times[r], s.projected_states[r], mono);
        for (int c = 0; c < 4; ++c) psi(r, c) = mono[c];
    }
    const Matrix gram = psi.transpose() * psi;
    const Matrix check = qr.r_inverse.transpose() * gram * qr.r_inverse;
    CHECK((check - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("rank deficiency is rejected with an actionable error") {
    RegressionSample s;
    for (int i = 0; i < 100; ++i) {
        s.times.push_back(0.5);
        s.projected_states.push_back(1.0);  // single support point
        s.drift_targets.push_back(1.0);
        s.diffusion_targets.push_back(1.0);
    }
    CHECK_THROWS_WITH(orthonormalize(s, BasisSpec{1}),
                      Catch::Matchers::ContainsSubstring("reduce the basis degree"));
}

TEST_CASE("exact recovery of targets inside the span") {
    auto lin = [](double t, double y) { return 2.0 + 3.0 * t - 1.5 * y; };
    auto constant = [](double, double) { return 0.7; };
    const RegressionSample s = synthetic_sample(5000, 6, lin, constant);
    const SurrogateCoefficients fit = fit_surrogate(s, BasisSpec{2}, 1e-8);

    double rss = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double r = fit.drift_value(s.projected_states[i], s.times[i]) -
                         s.drift_targets[i];
        rss += r * r;
    }
    CHECK(rss < 1e-16 * static_cast<double>(s.size()));

    RngStream rng(9, 0);
    for (int i = 0; i < 50; ++i) {
        const double t = rng.uniform(), y = 4.0 * rng.uniform() - 2.0;
        CHECK(fit.drift_value(y, t) == Approx(lin(t, y)).margin(1e-10));
        CHECK(fit.b2_value(y, t) == Approx(0.7).margin(1e-10));
        CHECK(fit.diffusion_value(y, t) == Approx(std::sqrt(0.7)).margin(1e-10));
    }
}

TEST_CASE("scale equivariance of the drift fit") {
    auto wavy = [](double t, double y) { return std::sin(3.0 * y) + t * y; };
    auto constant = [](double, double) { return 1.0; };
    RegressionSample s = synthetic_sample(5000, 7, wavy, constant);
    const SurrogateCoefficients fit1 = fit_surrogate(s, BasisSpec{2}, 1e-8);
    for (double& f : s.drift_targets) f *= -2.5;
    const SurrogateCoefficients fit2 = fit_surrogate(s, BasisSpec{2}, 1e-8);
    RngStream rng(10, 0);
    for (int i = 0; i < 50; ++i) {
        const double t = rng.uniform(), y = 4.0 * rng.uniform() - 2.0;
        CHECK(fit2.drift_value(y, t) == Approx(-2.5 * fit1.drift_value(y, t)).epsilon(1e-12));
    }
}

TEST_CASE("floored squared diffusion stays strictly positive") {
    auto negative = [](double, double) { return -3.0; };
    const RegressionSample s = synthetic_sample(2000, 8, negative, negative);
    const SurrogateCoefficients fit = fit_surrogate(s, BasisSpec{1}, 1e-8);
    RngStream rng(11, 0);
    for (int i = 0; i < 100; ++i) {
        const double t = rng.uniform(), y = 10.0 * rng.uniform() - 5.0;
        CHECK(fit.b2_value(y, t) >= 1e-8);
        CHECK(fit.diffusion_value(y, t) > 0.0);
    }
}

TEST_CASE("langevin surrogate drift against the binned conditional-mean oracle") {
    const double kappa = 0.3084251375340424;
    const SdeModel lan = langevin_model(kappa, 1.0);
    Vector prow(2);
    prow << 0.0, 1.0;
    const Projection p(prow);
    const GaussianDensity rho0(Vector::Zero(2), 0.5 * Matrix::Identity(2, 2));
    const int n_paths = 4000, steps = 100;
    const RegressionSample s =
        generate_regression_data(lan, p, rho0, n_paths, pilot_cfg(), 13, 0, 2);
    const SurrogateCoefficients fit = fit_surrogate(s, BasisSpec{3}, 1e-8);

    // Bin by the projected state and compare the mean target to the mean
    // fitted value over the same (t, y) pairs. The snapshots of one pilot
    // path are serially dependent, so the standard error of a bin mean is
    // clustered by path (sum the residuals per path before squaring); the
    // naive per-sample SE would be several times too small.
    double lo = 1e300, hi = -1e300;
    for (double y : s.projected_states) {
        lo = std::min(lo, y);
        hi = std::max(hi, y);
    }
    const int bins = 50;
    std::vector<double> n(bins, 0.0), sum_t(bins, 0.0), sum_f(bins, 0.0);
    std::vector<std::vector<double>> path_resid(bins,
                                                std::vector<double>(n_paths, 0.0));
    for (std::size_t i = 0; i < s.size(); ++i) {
        int b = static_cast<int>((s.projected_states[i] - lo) / (hi - lo) * bins);
        b = std::min(std::max(b, 0), bins - 1);
        const double f = fit.drift_value(s.projected_states[i], s.times[i]);
        n[b] += 1.0;
        sum_t[b] += s.drift_targets[i];
        sum_f[b] += f;
        path_resid[b][i / steps] += s.drift_targets[i] - f;
    }
    int populated = 0;
    for (int b = 0; b < bins; ++b) {
        if (n[b] < 100.0) continue;
        ++populated;
        double cluster_var = 0.0;
        for (double r : path_resid[b]) cluster_var += r * r;
        const double se = std::sqrt(cluster_var) / n[b];
        CHECK(std::abs(sum_f[b] / n[b] - sum_t[b] / n[b]) < 3.0 * se + 1e-12);
    }
    CHECK(populated >= 20);
}
