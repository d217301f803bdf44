#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>

#include "retrack/model.hpp"
#include "retrack/rng.hpp"

using namespace retrack;
using Catch::Approx;

namespace {
double dw_potential(double u) { return 1.0 / (2.0 + 4.0 * u * u) + 0.25 * u * u; }
}  // namespace

TEST_CASE("double well drift and diffusion") {
    const SdeModel m = double_well_model(0.5);
    REQUIRE(m.dim_state == 1);
    REQUIRE(m.dim_noise == 1);

    Vector x(1);
    x[0] = 0.0;
    CHECK(m.drift_at(x)[0] == Approx(0.0).margin(1e-15));
    x[0] = 1.0;
    CHECK(m.drift_at(x)[0] == Approx(-(-8.0 / 36.0 + 0.5)).epsilon(1e-12));  // -0.2778
    CHECK(m.diffusion_at(x)(0, 0) == 0.5);

    CHECK_THROWS_AS(double_well_model(0.0), ModelError);
    CHECK_THROWS_AS(double_well_model(-1.0), ModelError);
}

TEST_CASE("double well drift is odd and matches finite differences of V") {
    const SdeModel m = double_well_model(0.5);
    RngStream rng(42, 0);
    Vector x(1), nx(1);
    int checked = 0;
    for (int i = 0; i < 100; ++i) {
        const double u = 4.0 * rng.uniform() - 2.0;
        x[0] = u;
        nx[0] = -u;
        CHECK(m.drift_at(nx)[0] == Approx(-m.drift_at(x)[0]).margin(1e-14));

        const double h = 1e-6;
        const double fd = -(dw_potential(u + h) - dw_potential(u - h)) / (2.0 * h);
        if (std::abs(fd) > 1e-2) {
            CHECK(m.drift_at(x)[0] == Approx(fd).epsilon(1e-6));
            ++checked;
        }
    }
    CHECK(checked > 50);
}

TEST_CASE("langevin model") {
    const double kappa = std::pow(2.0, -5.0) * M_PI * M_PI;
    const SdeModel m = langevin_model(kappa, 1.0);
    REQUIRE(m.dim_state == 2);
    REQUIRE(m.dim_noise == 1);

    Vector x(2);
    x << 0.0, 0.0;
    CHECK(m.drift_at(x).norm() == Approx(0.0).margin(1e-15));

    // diffusion column (0, sqrt(2 kappa T)) = (0, pi/4) for kappa = 2^-5 pi^2
    const Matrix b = m.diffusion_at(x);
    CHECK(b(0, 0) == 0.0);
    CHECK(b(1, 0) == Approx(M_PI / 4.0).epsilon(1e-12));

    // drift at (1, 2): first component v, second -V'(1) - 2 kappa, with the
    // finite-difference oracle of V as the cross-check
    x << 1.0, 2.0;
    const Vector a = m.drift_at(x);
    CHECK(a[0] == 2.0);
    const double h = 1e-6;
    const double vprime = (dw_potential(1.0 + h) - dw_potential(1.0 - h)) / (2.0 * h);
    CHECK(a[1] == Approx(-vprime - 2.0 * kappa).epsilon(1e-6));

    CHECK_THROWS_AS(langevin_model(0.0, 1.0), ModelError);
    CHECK_THROWS_AS(langevin_model(1.0, -2.0), ModelError);
}

TEST_CASE("charney-devore coefficients regenerate from their formulas") {
    const CdvCoefficients c;
    const double q = 0.5, beta = 1.25, gam = 0.2;
    const double pi = 3.14159265358979323846;
    CHECK(c.eta == Approx(16.0 * std::sqrt(2.0) / (5.0 * pi)).epsilon(1e-12));
    CHECK(c.eta == Approx(1.4405).epsilon(5e-5));  // 5 s.f.
    for (int j = 0; j < 2; ++j) {
        const double mm = j + 1.0;
        const double m2 = mm * mm, q2 = q * q;
        CHECK(c.alpha[j] ==
              Approx(8.0 * std::sqrt(2.0) / pi * m2 / (4 * m2 - 1) * (q2 + m2 - 1) / (q2 + m2))
                  .epsilon(1e-12));
        CHECK(c.beta[j] == Approx(beta * q2 / (q2 + m2)).epsilon(1e-12));
        CHECK(c.gamma[j] == Approx(gam * std::sqrt(2.0) * q / pi * 4 * m2 * mm /
                                   ((4 * m2 - 1) * (q2 + m2)))
                                .epsilon(1e-12));
        CHECK(c.gamma_tilde[j] ==
              Approx(gam * std::sqrt(2.0) * q / pi * 4 * mm / (4 * m2 - 1)).epsilon(1e-12));
        CHECK(c.delta[j] ==
              Approx(64.0 * std::sqrt(2.0) / (15 * pi) * (q2 - m2 + 1) / (q2 + m2))
                  .epsilon(1e-12));
    }
}

TEST_CASE("charney-devore drift vanishes at a fixed point of the deterministic system") {
    const SdeModel m = charney_devore_model(0.0);
    REQUIRE(m.dim_state == 6);
    REQUIRE(m.dim_noise == 6);

    // Newton with a finite-difference Jacobian from the zonal forcing state.
    Vector x(6);
    x << 0.95, 0.0, 0.0, -0.76095, 0.0, 0.0;
    for (int it = 0; it < 60; ++it) {
        const Vector f = m.drift_at(x);
        if (f.norm() < 1e-12) break;
        Matrix jac(6, 6);
        const double h = 1e-7;
        for (int j = 0; j < 6; ++j) {
            Vector xp = x, xm = x;
            xp[j] += h;
            xm[j] -= h;
            jac.col(j) = (m.drift_at(xp) - m.drift_at(xm)) / (2.0 * h);
        }
        x -= jac.partialPivLu().solve(f);
    }
    CHECK(m.drift_at(x).norm() < 1e-8);
}

TEST_CASE("charney-devore diffusion is sqrt(2b) identity") {
    const SdeModel m = charney_devore_model(0.01);
    Vector x = Vector::Zero(6);
    const Matrix b = m.diffusion_at(x);
    CHECK((b - std::sqrt(0.02) * Matrix::Identity(6, 6)).norm() == Approx(0.0).margin(1e-14));
    CHECK(b(0, 0) == Approx(0.1414).epsilon(1e-3));
    CHECK_THROWS_AS(charney_devore_model(-0.1), ModelError);
    CHECK_NOTHROW(charney_devore_model(0.0));
}

TEST_CASE("projection") {
    Vector p2(2);
    p2 << 0.0, 1.0;
    Vector x2(2);
    x2 << 3.0, 5.0;
    CHECK(project(Projection(p2), x2) == 5.0);

    Vector p6 = Vector::Zero(6);
    p6[0] = 1.0;
    Vector e1 = Vector::Zero(6);
    e1[0] = 1.0;
    CHECK(project(Projection(p6), e1) == 1.0);

    Vector p1(1), x1(1);
    p1 << 2.0;
    x1 << 1.5;
    CHECK(project(Projection(p1), x1) == 3.0);

    CHECK_THROWS_AS(project(Projection(p2), x1), ModelError);
    CHECK_THROWS_AS(Projection(Vector::Zero(3)), ModelError);
}

TEST_CASE("gaussian density invariants and sampling") {
    Matrix bad(2, 2);
    bad << 1.0, 2.0, 2.0, 1.0;  // eigenvalues 3, -1
    CHECK_THROWS_AS(GaussianDensity(Vector::Zero(2), bad), ModelError);

    Matrix cov(2, 2);
    cov << 1.0, 0.7, 0.7, 1.0;
    Vector mean(2);
    mean << -1.0, 2.0;
    const GaussianDensity g(mean, cov);

    RngStream rng(7, 3);
    const int n = 200000;
    Vector s1 = Vector::Zero(2);
    Matrix s2 = Matrix::Zero(2, 2);
    for (int i = 0; i < n; ++i) {
        const Vector x = g.sample(rng);
        s1 += x;
        s2.noalias() += x * x.transpose();
    }
    const Vector m_hat = s1 / n;
    const Matrix c_hat = s2 / n - m_hat * m_hat.transpose();
    CHECK((m_hat - mean).norm() < 0.02);
    CHECK((c_hat - cov).norm() < 0.03);

    Vector prow(2);
    prow << 0.0, 1.0;
    auto [my, sy] = g.marginal(Projection(prow));
    CHECK(my == Approx(2.0));
    CHECK(sy == Approx(1.0));
}

TEST_CASE("rare event horizon must have positive length") {
    Vector p(1);
    p << 1.0;
    CHECK_THROWS_AS(RareEvent(1.0, Projection(p), 1.0, 1.0), ModelError);
    CHECK_NOTHROW(RareEvent(1.0, Projection(p), 0.0, 1.0));
}
