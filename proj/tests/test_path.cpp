#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "retrack/model.hpp"
#include "retrack/numerics.hpp"
#include "retrack/parallel.hpp"
#include "retrack/path.hpp"
#include "retrack/rng.hpp"

using namespace retrack;
using Catch::Approx;

namespace {

RareEvent dw_event(double k, double t_end = 1.0) {
    Vector p(1);
    p << 1.0;
    return RareEvent(k, Projection(p), 0.0, t_end);
}

}  // namespace

TEST_CASE("rng streams reproduce bit-exactly and are stream-independent") {
    RngStream a(123, 7), b(123, 7), c(123, 8);
    for (int i = 0; i < 1000; ++i) {
        const double ua = a.uniform();
        CHECK(ua == b.uniform());
        CHECK(a.normal() == b.normal());
        (void)c.uniform();
    }
    RngStream d(123, 8);
    double max_abs = 0.0;
    for (int i = 0; i < 1000; ++i) max_abs = std::max(max_abs, std::abs(d.normal()));
    CHECK(max_abs < 6.0);  // sane normals
}

TEST_CASE("em_step examples") {
    Vector empty_control;

    const SdeModel still = constant_model(0.0, 0.0);
    Vector x(1), noise(1);
    x << 0.3;
    noise << 0.9;
    CHECK(em_step(still, x, empty_control, 0.1, noise)[0] == 0.3);

    const SdeModel drift_only = constant_model(1.0, 0.0);
    x << 0.0;
    noise << 0.0;
    CHECK(em_step(drift_only, x, empty_control, 0.5, noise)[0] == Approx(0.5));

    const SdeModel dw = double_well_model(0.5);
    x << -1.0;
    noise << 0.1;
    CHECK(em_step(dw, x, empty_control, 0.01, noise)[0] == Approx(-0.9472).epsilon(1e-4));
}

TEST_CASE("bridge exit probability") {
    const SdeModel dw = double_well_model(0.5);
    Vector p(1);
    p << 1.0;
    const Projection proj(p);

    Vector below(1), above(1);
    below << 0.0;
    above << 1.5;
    CHECK(bridge_exit_probability(dw, proj, 1.0, below, above, 0.01) == 1.0);
    CHECK(bridge_exit_probability(dw, proj, 1.0, above, below, 0.01) == 1.0);

    // distances 1 and 1 with (P1 b b^T P1^T) h = 1: q = exp(-2)
    const SdeModel unit = constant_model(0.0, 1.0);
    Vector xk(1), xk1(1);
    xk << 0.0;
    xk1 << 0.0;
    CHECK(bridge_exit_probability(unit, proj, 1.0, xk, xk1, 1.0) ==
          Approx(std::exp(-2.0)).epsilon(1e-12));
    CHECK(bridge_exit_probability(unit, proj, 1.0, xk, xk1, 1.0) == Approx(0.13534).epsilon(1e-4));

    // distances 0.5 and 0.5 with var h = 0.25 * 0.01: q = exp(-200), tiny
    const SdeModel half = constant_model(0.0, 0.5);
    xk << 0.5;
    xk1 << 0.5;
    const double tiny = bridge_exit_probability(half, proj, 1.0, xk, xk1, 0.01);
    CHECK(tiny == Approx(std::exp(-200.0)).epsilon(1e-10));
    CHECK(tiny < 1e-80);
    // true underflow flushes to zero without error
    CHECK(bridge_exit_probability(half, proj, 1.0, xk, xk1, 1e-6) == 0.0);

    const SdeModel nodiff = constant_model(0.0, 0.0);
    CHECK_THROWS_AS(bridge_exit_probability(nodiff, proj, 1.0, xk, xk1, 0.01), NumericError);
}

TEST_CASE("simulate_path immediate hit and constant path") {
    PathConfig cfg;
    cfg.dt = 0.01;
    cfg.horizon_end = 1.0;
    cfg.delta_t_switch = 0.1;
    const SdeModel dw = double_well_model(0.5);

    RngStream rng(5, 0);
    Vector x0(1);
    x0 << 1.2;
    const PathOutcome hit = simulate_path(dw, dw_event(1.0), x0, nullptr, cfg, rng);
    CHECK(hit.hit);
    CHECK(hit.stopping_time == 0.0);
    CHECK(hit.log_likelihood_w == 0.0);
    CHECK(hit.steps_taken == 0);

    const SdeModel frozen = constant_model(0.0, 0.0);
    x0 << 0.0;
    const PathOutcome still = simulate_path(frozen, dw_event(1.0), x0, nullptr, cfg, rng);
    CHECK_FALSE(still.hit);
    CHECK(still.stopping_time == 1.0);
    CHECK(still.terminal_state[0] == 0.0);
}

TEST_CASE("simulate_path reproducibility and zero-control likelihood") {
    PathConfig cfg;
    cfg.dt = 0.01;
    cfg.horizon_end = 1.0;
    cfg.delta_t_switch = 0.1;
    const SdeModel dw = double_well_model(0.5);
    const RareEvent event = dw_event(1.0);

    for (int i = 0; i < 100; ++i) {
        RngStream r1(99, i), r2(99, i);
        Vector x0(1);
        x0 << -1.0;
        const PathOutcome a = simulate_path(dw, event, x0, nullptr, cfg, r1);
        const PathOutcome b = simulate_path(dw, event, x0, nullptr, cfg, r2);
        CHECK(a.hit == b.hit);
        CHECK(a.stopping_time == b.stopping_time);
        CHECK(a.terminal_state[0] == b.terminal_state[0]);
        CHECK(a.steps_taken == b.steps_taken);
        CHECK(a.log_likelihood_w == 0.0);  // exactly zero without control
    }
}

TEST_CASE("adaptive rule takes the uniform steps plus a geometric tail") {
    PathConfig cfg;
    cfg.dt = 0.01;
    cfg.horizon_end = 1.0;
    cfg.delta_t_switch = 0.1;
    cfg.epsilon_min_step = 1e-6;
    const SdeModel quiet = constant_model(0.0, 1e-8);  // never hits K = 100
    RngStream rng(3, 1);
    Vector x0(1);
    x0 << 0.0;
    const PathOutcome o = simulate_path(quiet, dw_event(100.0), x0, nullptr, cfg, rng);
    CHECK_FALSE(o.hit);
    // 100 uniform steps, then h halves from dt toward epsilon
    CHECK(o.steps_taken >= 100);
    CHECK(o.steps_taken <= 100 + 20);
}

TEST_CASE("path config invariants") {
    PathConfig cfg;
    cfg.dt = 0.01;
    cfg.horizon_end = 1.0;
    cfg.delta_t_switch = 0.1;
    CHECK_NOTHROW(cfg.validate());
    cfg.delta_t_switch = 0.015;  // not a multiple of dt
    CHECK_THROWS_AS(cfg.validate(), NumericError);
    cfg.delta_t_switch = 0.1;
    cfg.epsilon_min_step = 0.1;  // not below dt
    CHECK_THROWS_AS(cfg.validate(), NumericError);
    cfg.epsilon_min_step = 1e-6;
    cfg.dt = 2.0;  // not below horizon
    CHECK_THROWS_AS(cfg.validate(), NumericError);
}

TEST_CASE("control switch boundary and asymptotic formula") {
    const SdeModel cm = constant_model(0.3, 0.5);
    Vector prow(1);
    prow << 1.0;
    const Projection p(prow);
    const Coefficients1D coeffs = coefficients_from_model_1d(cm, p);
    const double T = 1.0, dts = 0.1, K = 2.0;

    ControlField pde_like(1, [](const Vector&, double, Vector& out) { out[0] = 42.0; });
    ControlField asym = asymptotic_control(cm, p, coeffs, K, T);
    ControlField switched = control_with_switch(pde_like, asym, T, dts);

    Vector x(1), out(1);
    x << 1.0;
    switched.eval(x, T - dts, out);  // boundary belongs to the PDE side
    CHECK(out[0] == 42.0);

    const double t = T - dts / 2.0;
    switched.eval(x, t, out);
    CHECK(out[0] == Approx((K - 1.0) / (0.5 * (T - t)) - 0.3).epsilon(1e-12));

    // at x = K the numerator vanishes: xi_inf = -a
    x << K;
    switched.eval(x, t, out);
    CHECK(out[0] == Approx(-0.3).epsilon(1e-12));
}

TEST_CASE("plain MC estimate of the double well K=1 probability lands in the reference interval") {
    // u0 ~ N(-1, 0.2^2), T = 1, dt = 0.01, J = 1e6 crude MC paths
    PathConfig cfg;
    cfg.dt = 0.01;
    cfg.horizon_end = 1.0;
    cfg.delta_t_switch = 0.1;
    const SdeModel dw = double_well_model(0.5);
    const RareEvent event = dw_event(1.0);
    const long long n = 1000000;

    std::vector<double> hits(n, 0.0);
    parallel_for(n, 2, [&](std::size_t i) {
        RngStream rng(2024, 1000 + i);
        Vector x0(1);
        x0[0] = -1.0 + 0.2 * rng.normal();
        const PathOutcome o = simulate_path(dw, event, x0, nullptr, cfg, rng);
        if (o.hit) hits[i] = 1.0;
    });
    const double alpha = pairwise_sum(hits) / static_cast<double>(n);
    CHECK(alpha >= 1.6e-4);
    CHECK(alpha <= 2.1e-4);
}
