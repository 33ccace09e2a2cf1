#include <doctest.h>

#include <cmath>
#include <sstream>

#include "mfg/cascade.hpp"
#include "mfg/errors.hpp"
#include "mfg/model.hpp"
#include "mfg/solver.hpp"

using namespace mfg;

namespace {

struct LqSetup {
    CoefficientModel model = lq_model();
    ConstantCascade cascade = compute_cascade(lq_model());
};

struct NonLqSetup {
    NonLQExampleParams params;
    CoefficientModel model;
    ConstantCascade cascade;
    explicit NonLqSetup(NonLQExampleParams p = {})
        : params(p), model(nonlq_model(p)), cascade(compute_cascade(model)) {}
};

// The linear-quadratic flow from any initial row value r0 is
// X_s = Z_s = r0 exp(-(s - t)): the terminal slope is the identity, so the
// stationary Riccati gain is 1 and alpha = -z closes the loop x' = -x.
double lq_max_error(const FlowSolution& sol) {
    double worst = 0.0;
    for (int i = 0; i <= sol.grid.n_steps; ++i) {
        double decay = std::exp(-(sol.grid.node(i) - sol.grid.t_start));
        for (int r = 0; r < sol.n_rows(); ++r) {
            double want = sol.X[0](r, 0) * decay;
            worst = std::max(worst, std::fabs(sol.X[i](r, 0) - want));
            worst = std::max(worst, std::fabs(sol.Z[i](r, 0) - want));
        }
    }
    return worst;
}

double max_rows_diff(const std::vector<Mat>& a, const std::vector<Mat>& b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, (a[i] - b[i]).cwiseAbs().maxCoeff());
    return worst;
}

}  // namespace

TEST_CASE("time grid validates and reproduces endpoints exactly") {
    CHECK_THROWS_AS(TimeGrid(1.0, 1.0, 4), ConfigError);
    CHECK_THROWS_AS(TimeGrid(1.0, 0.5, 4), ConfigError);
    CHECK_THROWS_AS(TimeGrid(0.0, 1.0, 0), ConfigError);
    TimeGrid g(0.2, 1.1, 7);
    CHECK(g.node(0) == 0.2);
    CHECK(g.node(7) == 1.1);
    CHECK(g.n_nodes() == 8);
    CHECK(g.dt() == doctest::Approx((1.1 - 0.2) / 7).epsilon(1e-15));
}

TEST_CASE("lq local solve tracks the exponential characteristics") {
    LqSetup lq;
    EmpiricalMeasure m0 = EmpiricalMeasure::dirac1(1.0);
    TimeGrid grid(0.0, 0.5, 500);
    FlowSolution sol =
        solve_local(lq.model, lq.cascade, m0, grid, terminal_from_dx_k(lq.model));

    CHECK(sol.X[0](0, 0) == 1.0);  // initial row is reproduced bit-exactly
    CHECK(lq_max_error(sol) < 1e-10);
    CHECK(sol.terminal_residual == 0.0);  // undamped sweeps end on the terminal map
    CHECK(sol.cone_ok);
    CHECK(sol.worst_cone_margin > 0.0);
    CHECK(sol.picard_iterations < 60);
    CHECK(sol.interval_boundaries.size() == 2);
}

TEST_CASE("probe rows ride along without back-reaction on the points") {
    LqSetup lq;
    Mat pts(2, 1);
    pts << -1.0, 0.5;
    EmpiricalMeasure plain = EmpiricalMeasure::uniform(pts);
    Mat probe(1, 1);
    probe << 2.0;
    EmpiricalMeasure probed = plain.with_probes(probe);

    TimeGrid grid(0.0, 0.5, 100);
    FlowSolution a = solve_local(lq.model, lq.cascade, plain, grid, terminal_from_dx_k(lq.model));
    FlowSolution b = solve_local(lq.model, lq.cascade, probed, grid, terminal_from_dx_k(lq.model));

    REQUIRE(b.n_rows() == 3);
    for (int i = 0; i <= grid.n_steps; ++i) {
        CHECK(a.X[i](0, 0) == b.X[i](0, 0));
        CHECK(a.X[i](1, 0) == b.X[i](1, 0));
        CHECK(a.Z[i](0, 0) == b.Z[i](0, 0));
    }
    CHECK(lq_max_error(b) < 1e-10);  // the probe decays like any characteristic
}

TEST_CASE("rk4 coupling keeps fourth-order convergence under step halving") {
    LqSetup lq;
    EmpiricalMeasure m0 = EmpiricalMeasure::dirac1(2.0);
    auto err_at = [&](int n) {
        TimeGrid grid(0.0, 0.5, n);
        return lq_max_error(solve_local(lq.model, lq.cascade, m0, grid,
                                        terminal_from_dx_k(lq.model)));
    };
    double coarse = err_at(8);
    double fine = err_at(16);
    CHECK(coarse > 0.0);
    CHECK(fine > 0.0);
    CHECK(coarse / fine >= 6.4);
}

TEST_CASE("the origin with a dirac mass is an exact fixed point of both models") {
    LqSetup lq;
    NonLqSetup nl;
    EmpiricalMeasure m0 = EmpiricalMeasure::dirac1(0.0);
    for (const auto* setup : {&lq.model, &nl.model}) {
        const ConstantCascade& cc = (setup == &lq.model) ? lq.cascade : nl.cascade;
        FlowSolution sol = solve_global(*setup, cc, m0, 0.0, 1.0, 1e-2);
        CHECK(max_rows_diff(sol.X, std::vector<Mat>(sol.X.size(), Mat::Zero(1, 1))) == 0.0);
        CHECK(max_rows_diff(sol.Z, std::vector<Mat>(sol.Z.size(), Mat::Zero(1, 1))) == 0.0);
        CHECK(nash_gap(*setup, cc, sol) == 0.0);
    }
}

TEST_CASE("single-interval global solve equals the local solve bit for bit") {
    LqSetup lq;
    EmpiricalMeasure m0 = EmpiricalMeasure::gaussian(0.5, 0.3, 8, 42);
    TimeGrid grid(0.0, 0.4, 400);
    FlowSolution local =
        solve_local(lq.model, lq.cascade, m0, grid, terminal_from_dx_k(lq.model));
    FlowSolution global = solve_global(lq.model, lq.cascade, m0, 0.0, 0.4, 1e-3);
    REQUIRE(global.grid.n_steps == 400);
    CHECK(global.interval_boundaries.size() == 2);
    CHECK(max_rows_diff(local.X, global.X) == 0.0);
    CHECK(max_rows_diff(local.Z, global.Z) == 0.0);
    CHECK(max_rows_diff(local.A, global.A) == 0.0);
}

TEST_CASE("pasted long-horizon solve matches the exact flow and a damped one-shot solve") {
    LqSetup lq;
    EmpiricalMeasure m0 = EmpiricalMeasure::dirac1(3.0);
    const double dt = 2e-3;

    FlowSolution pasted = solve_global(lq.model, lq.cascade, m0, 0.0, 5.0, dt);
    CHECK(pasted.interval_boundaries.size() == 11);  // 0, 0.5, ..., 5 from the terminal side
    for (size_t i = 0; i < pasted.interval_boundaries.size(); ++i)
        CHECK(pasted.interval_boundaries[i] == doctest::Approx(0.5 * double(i)).epsilon(1e-12));
    CHECK(lq_max_error(pasted) < 1e-6);
    CHECK(pasted.terminal_residual < 1e-8);
    CHECK(pasted.cone_ok);

    // The undamped whole-horizon sweep diverges here; a damped one converges
    // to the same discrete system, so the two solution paths must agree far
    // below the discretization error.
    SolverOptions damped;
    damped.damping = 0.125;
    damped.picard_max = 600;
    TimeGrid grid(0.0, 5.0, int(std::llround(5.0 / dt)));
    FlowSolution oneshot =
        solve_local(lq.model, lq.cascade, m0, grid, terminal_from_dx_k(lq.model), damped);
    CHECK(max_rows_diff(pasted.X, oneshot.X) < 1e-7);
    CHECK(max_rows_diff(pasted.Z, oneshot.Z) < 1e-7);
}

TEST_CASE("undamped whole-horizon sweeps on a long interval are rejected, not looped") {
    LqSetup lq;
    EmpiricalMeasure m0 = EmpiricalMeasure::dirac1(1.0);
    SolverOptions opts;
    opts.picard_max = 30;
    TimeGrid grid(0.0, 5.0, 500);
    CHECK_THROWS_AS(
        solve_local(lq.model, lq.cascade, m0, grid, terminal_from_dx_k(lq.model), opts),
        PicardDiverged);
}

TEST_CASE("interval splitting bottoms out in interval underflow") {
    LqSetup lq;
    EmpiricalMeasure m0 = EmpiricalMeasure::dirac1(1.0);
    SolverOptions opts;
    opts.picard_max = 2;  // no interval can converge, so splitting must bottom out
    CHECK_THROWS_AS(solve_global(lq.model, lq.cascade, m0, 0.0, 2.0, 1e-2, opts),
                    IntervalUnderflow);
}

TEST_CASE("repeated global solves are bit-identical, csv included") {
    LqSetup lq;
    EmpiricalMeasure m0 = EmpiricalMeasure::gaussian(-0.2, 0.4, 6, 7);
    FlowSolution a = solve_global(lq.model, lq.cascade, m0, 0.0, 1.0, 1e-3);
    FlowSolution b = solve_global(lq.model, lq.cascade, m0, 0.0, 1.0, 1e-3);
    CHECK(max_rows_diff(a.X, b.X) == 0.0);
    CHECK(max_rows_diff(a.Z, b.Z) == 0.0);
    CHECK(trajectory_csv(a) == trajectory_csv(b));
}

TEST_CASE("trajectory csv layout") {
    LqSetup lq;
    Mat pts(2, 1);
    pts << 1.0, -1.0;
    Mat probe(1, 1);
    probe << 0.25;
    EmpiricalMeasure m0 = EmpiricalMeasure::uniform(pts).with_probes(probe);
    TimeGrid grid(0.0, 0.1, 4);
    FlowSolution sol = solve_local(lq.model, lq.cascade, m0, grid, terminal_from_dx_k(lq.model));
    std::string csv = trajectory_csv(sol);

    std::istringstream in(csv);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "s,id,kind,X_1,Z_1,alpha_1");
    int rows = 0;
    bool saw_probe = false;
    while (std::getline(in, line)) {
        ++rows;
        if (line.find(",probe,") != std::string::npos) saw_probe = true;
    }
    CHECK(rows == 5 * 3);
    CHECK(saw_probe);
    CHECK(csv.substr(csv.find('\n') + 1, 10) == std::string("0,0,point,"));
}

TEST_CASE("nash gap of converged runs sits at the sweep tolerance") {
    LqSetup lq;
    EmpiricalMeasure m0 = EmpiricalMeasure::gaussian(1.0, 0.5, 16, 3);
    FlowSolution sol = solve_global(lq.model, lq.cascade, m0, 0.0, 1.0, 1e-3);
    CHECK(nash_gap(lq.model, lq.cascade, sol) < 1e-7);

    NonLqSetup nl;
    Vec w(3);
    w << 0.5, 0.3, 0.2;
    Mat pts(3, 1);
    pts << -0.4, 0.1, 0.6;
    EmpiricalMeasure weighted(pts, w);
    FlowSolution nsol = solve_global(nl.model, nl.cascade, weighted, 0.0, 0.3, 1e-3);
    CHECK(nsol.terminal_residual < 1e-8);
    CHECK(nsol.cone_ok);
    CHECK(nash_gap(nl.model, nl.cascade, nsol) < 1e-7);
}

TEST_CASE("flow property: restarting the solve at an intermediate node lands on the same path") {
    LqSetup lq;
    EmpiricalMeasure m0 = EmpiricalMeasure::gaussian(0.8, 0.25, 5, 11);
    FlowSolution sol = solve_global(lq.model, lq.cascade, m0, 0.0, 1.0, 1e-3);

    CHECK(flow_property_check(lq.model, lq.cascade, sol, 0.0, 0.0, 0.75) == 0.0);
    CHECK(flow_property_check(lq.model, lq.cascade, sol, 0.0, 0.5, 0.5) == 0.0);
    CHECK(flow_property_check(lq.model, lq.cascade, sol, 0.0, 0.5, 0.75) < 1e-6);
    CHECK(flow_property_check(lq.model, lq.cascade, sol, 0.0, 0.25, 1.0) < 1e-6);
    CHECK_THROWS_AS(flow_property_check(lq.model, lq.cascade, sol, 0.0, 0.33333, 0.75),
                    ConfigError);
}

TEST_CASE("decoupling field evaluation through a riding probe") {
    LqSetup lq;
    EmpiricalMeasure m = EmpiricalMeasure::gaussian(-0.5, 0.7, 9, 19);
    Vec x(1);
    x << 0.7;
    // The linear-quadratic field is gamma(t, x, m) = x at every horizon.
    Vec g = eval_gamma(lq.model, lq.cascade, 0.25, x, m, 1.0, 1e-3);
    CHECK(std::fabs(g[0] - 0.7) < 1e-8);

    // At the horizon the field is the terminal slope itself.
    NonLqSetup nl;
    Vec gT = eval_gamma(nl.model, nl.cascade, 1.0, x, m, 1.0, 1e-3);
    double first_moment = m.integrate([](const Vec& y) { return y[0]; });
    CHECK(gT[0] == doctest::Approx(0.7 - nl.params.eps4 * first_moment).epsilon(1e-14));

    // The zero fixed point pins gamma(t, 0, delta_0) = 0 exactly.
    Vec zero = Vec::Zero(1);
    Vec g0 = eval_gamma(nl.model, nl.cascade, 0.0, zero, EmpiricalMeasure::dirac1(0.0), 0.5, 1e-3);
    CHECK(g0[0] == 0.0);
}

TEST_CASE("stressed coupling strengths still converge on a short horizon") {
    NonLqSetup stress(NonLQExampleParams{0.01, 0.5, 0.125, 0.5});
    EmpiricalMeasure m0 = EmpiricalMeasure::gaussian(0.0, 0.5, 64, 123);
    FlowSolution sol = solve_global(stress.model, stress.cascade, m0, 0.0, 0.25, 1e-3);
    CHECK(sol.terminal_residual < 1e-8);
    CHECK(sol.cone_ok);
    CHECK(sol.picard_iterations < 100);
}

TEST_CASE("state-direction jacobian: exact on lq, finite differences elsewhere") {
    LqSetup lq;
    EmpiricalMeasure m0 = EmpiricalMeasure::gaussian(0.3, 0.4, 4, 5);
    FlowSolution sol = solve_global(lq.model, lq.cascade, m0, 0.0, 1.0, 2e-3);
    JacobianFlow jac = jacobian_flow_x(lq.model, lq.cascade, sol);
    for (int i = 0; i <= sol.grid.n_steps; i += 50) {
        double decay = std::exp(-sol.grid.node(i));
        for (int r = 0; r < sol.n_rows(); ++r) {
            CHECK(jac.dX[i][r](0, 0) == doctest::Approx(decay).epsilon(1e-9));
            CHECK(jac.dZ[i][r](0, 0) == doctest::Approx(decay).epsilon(1e-9));
        }
    }
}

TEST_CASE("state-direction jacobian cross-checks against probe nudges") {
    NonLqSetup nl;
    Mat pts(4, 1);
    pts << -0.6, -0.1, 0.2, 0.7;
    const double x0 = 0.4, delta = 1e-5, T = 0.2, dt = 1e-3;
    auto probed = [&](double xp) {
        Mat probe(1, 1);
        probe << xp;
        return EmpiricalMeasure::uniform(pts).with_probes(probe);
    };
    FlowSolution base = solve_global(nl.model, nl.cascade, probed(x0), 0.0, T, dt);
    FlowSolution up = solve_global(nl.model, nl.cascade, probed(x0 + delta), 0.0, T, dt);
    FlowSolution dn = solve_global(nl.model, nl.cascade, probed(x0 - delta), 0.0, T, dt);
    JacobianFlow jac = jacobian_flow_x(nl.model, nl.cascade, base);

    const int probe_row = 4;
    for (int i : {0, 100, 200}) {
        double fd_x = (up.X[i](probe_row, 0) - dn.X[i](probe_row, 0)) / (2 * delta);
        double fd_z = (up.Z[i](probe_row, 0) - dn.Z[i](probe_row, 0)) / (2 * delta);
        CHECK(std::fabs(jac.dX[i][probe_row](0, 0) - fd_x) < 1e-4);
        CHECK(std::fabs(jac.dZ[i][probe_row](0, 0) - fd_z) < 1e-4);
    }
    // Point rows carry the same fixed-measure linearization.
    CHECK(jac.dX[0][0](0, 0) == 1.0);
}

TEST_CASE("measure-direction jacobian vanishes without mean-field coupling") {
    LqSetup lq;
    Mat pts(3, 1);
    pts << -1.0, 0.2, 0.9;
    EmpiricalMeasure m0 = EmpiricalMeasure::uniform(pts);
    FlowSolution sol = solve_global(lq.model, lq.cascade, m0, 0.0, 1.0, 2e-3);
    JacobianFlow jx = jacobian_flow_x(lq.model, lq.cascade, sol);
    JacobianFlow jm = jacobian_flow_m(lq.model, lq.cascade, sol, 1, jx);
    double worst = 0.0;
    for (int i = 0; i <= sol.grid.n_steps; ++i)
        for (int r = 0; r < sol.n_rows(); ++r) {
            worst = std::max(worst, jm.dX[i][r].cwiseAbs().maxCoeff());
            worst = std::max(worst, jm.dZ[i][r].cwiseAbs().maxCoeff());
        }
    CHECK(worst < 1e-11);
    CHECK(jm.slice == 1);
}

TEST_CASE("measure-direction jacobian cross-checks against weight-scaled particle nudges") {
    NonLqSetup nl;
    Mat pts(4, 1);
    pts << -0.5, 0.0, 0.3, 0.8;
    const int j = 1;
    const double delta = 1e-5, T = 0.2, dt = 1e-3;
    auto nudged = [&](double shift) {
        Mat p = pts;
        p(j, 0) += shift;
        return EmpiricalMeasure::uniform(p);
    };
    FlowSolution base = solve_global(nl.model, nl.cascade, nudged(0.0), 0.0, T, dt);
    FlowSolution up = solve_global(nl.model, nl.cascade, nudged(delta), 0.0, T, dt);
    FlowSolution dn = solve_global(nl.model, nl.cascade, nudged(-delta), 0.0, T, dt);
    JacobianFlow jx = jacobian_flow_x(nl.model, nl.cascade, base);
    JacobianFlow jm = jacobian_flow_m(nl.model, nl.cascade, base, j, jx);

    const double wj = 0.25;
    for (int i : {0, 100, 200}) {
        for (int r = 0; r < base.n_rows(); ++r) {
            double raw_x = (up.X[i](r, 0) - dn.X[i](r, 0)) / (2 * delta);
            double raw_z = (up.Z[i](r, 0) - dn.Z[i](r, 0)) / (2 * delta);
            if (r == j) {
                raw_x -= jx.dX[i][j](0, 0);
                raw_z -= jx.dZ[i][j](0, 0);
            }
            CHECK(std::fabs(jm.dX[i][r](0, 0) - raw_x / wj) < 1e-3);
            CHECK(std::fabs(jm.dZ[i][r](0, 0) - raw_z / wj) < 1e-3);
        }
    }
}

TEST_CASE("measure-direction jacobian rejects bad slices and oversized requests") {
    LqSetup lq;
    EmpiricalMeasure m0 = EmpiricalMeasure::dirac1(0.5);
    FlowSolution sol = solve_global(lq.model, lq.cascade, m0, 0.0, 0.1, 1e-2);
    JacobianFlow jx = jacobian_flow_x(lq.model, lq.cascade, sol);
    CHECK_THROWS_AS(jacobian_flow_m(lq.model, lq.cascade, sol, 1, jx), ConfigError);
    CHECK_THROWS_AS(jacobian_flow_m(lq.model, lq.cascade, sol, -1, jx), ConfigError);
    JacobianOptions tiny;
    tiny.storage_cap = 8;
    CHECK_THROWS_AS(jacobian_flow_x(lq.model, lq.cascade, sol, tiny), CapExceeded);
    CHECK_THROWS_AS(jacobian_flow_m(lq.model, lq.cascade, sol, 0, jx, tiny), CapExceeded);
}

TEST_CASE("jacobian growth stays under the cascade envelopes") {
    NonLqSetup nl;
    EmpiricalMeasure m0 = EmpiricalMeasure::gaussian(0.1, 0.3, 6, 77);
    FlowSolution sol = solve_global(nl.model, nl.cascade, m0, 0.0, 0.5, 1e-3);
    JacobianFlow jac = jacobian_flow_x(nl.model, nl.cascade, sol);
    for (int i = 0; i <= sol.grid.n_steps; i += 25) {
        double envelope = std::exp(nl.cascade.L_Bp * (sol.grid.node(i) - sol.grid.t_start));
        for (int r = 0; r < sol.n_rows(); ++r) {
            CHECK(jac.dX[i][r].norm() <= envelope);
            CHECK(jac.dZ[i][r].norm() <= nl.cascade.Lstar0 * envelope);
        }
    }
}
