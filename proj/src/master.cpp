#include "mfg/master.hpp"

#include <cmath>
#include <utility>
#include <vector>

#include "mfg/errors.hpp"

namespace mfg {

namespace {

// Node coefficients of the composite rule on n uniform steps of size h:
// Simpson when n is even (error h^4), trapezoid otherwise (error h^2).
std::vector<double> quad_weights(int n, double h, std::string* tag) {
    if (n <= 0) {
        if (tag) *tag = "simpson";
        return std::vector<double>(std::size_t(std::max(0, n) + 1), 0.0);
    }
    std::vector<double> w(std::size_t(n) + 1);
    if (n % 2 == 0) {
        if (tag) *tag = "simpson";
        w[0] = w[std::size_t(n)] = h / 3.0;
        for (int i = 1; i < n; ++i) w[std::size_t(i)] = (i % 2 ? 4.0 : 2.0) * h / 3.0;
    } else {
        if (tag) *tag = "trapezoid";
        w[0] = w[std::size_t(n)] = h / 2.0;
        for (int i = 1; i < n; ++i) w[std::size_t(i)] = h;
    }
    return w;
}

void require_row(const FlowSolution& sol, int row, const char* who) {
    if (row < 0 || row >= sol.n_rows())
        throw ConfigError(std::string(who) + ": row index out of range");
}

// Re-solve of the stored problem with one extra probe appended at `start`,
// returning the cost-to-go read at that probe. Existing probes are kept so
// the point rows see an identical problem. The solved flow also lands in
// *donor so the caller can chain it into the next re-solve as a warm start.
double value_at_shifted_probe(const CoefficientModel& model, const ConstantCascade& cascade,
                              const FlowSolution& sol, const Vec& start, SolverOptions opts,
                              FlowSolution* donor) {
    const EmpiricalMeasure& m0 = sol.m0;
    Mat probes(m0.n_probes() + 1, m0.dim());
    if (m0.n_probes() > 0) probes.topRows(m0.n_probes()) = m0.probes();
    probes.row(m0.n_probes()) = start.transpose();
    EmpiricalMeasure shifted(m0.points(), m0.weights(), std::move(probes));
    opts.warm_start = (donor && donor->n_rows() > 0) ? donor : nullptr;
    FlowSolution re = solve_global(model, cascade, shifted, sol.grid.t_start, sol.grid.t_end,
                                   sol.grid.dt(), opts);
    double v = value(model, re, re.n_rows() - 1);
    if (donor) *donor = std::move(re);
    return v;
}

}  // namespace

double value_from(const CoefficientModel& model, const FlowSolution& solution, int row,
                  int node, std::string* quadrature) {
    require_row(solution, row, "value_from");
    const int n = solution.grid.n_steps;
    if (node < 0 || node > n) throw ConfigError("value_from: node index out of range");

    std::vector<double> qw = quad_weights(n - node, solution.grid.dt(), quadrature);
    double running = 0.0;
    for (int i = node; i <= n; ++i) {
        if (qw[std::size_t(i - node)] == 0.0) continue;
        double gi = model.g(solution.X[std::size_t(i)].row(row).transpose(),
                            solution.measure_at(i),
                            solution.A[std::size_t(i)].row(row).transpose());
        running += qw[std::size_t(i - node)] * gi;
    }
    double terminal = model.k(solution.X[std::size_t(n)].row(row).transpose(),
                              solution.measure_at(n));
    return terminal + running;
}

double value(const CoefficientModel& model, const FlowSolution& solution, int row,
             std::string* quadrature) {
    return value_from(model, solution, row, 0, quadrature);
}

double check_dxV_equals_Z(const CoefficientModel& model, const ConstantCascade& cascade,
                          const FlowSolution& solution, int row, double fd_step,
                          const SolverOptions& opts) {
    require_row(solution, row, "check_dxV_equals_Z");
    if (!(fd_step > 0.0)) throw ConfigError("check_dxV_equals_Z: fd_step must be positive");

    const Vec x0 = solution.X[0].row(row).transpose();
    const Vec z0 = solution.Z[0].row(row).transpose();
    double worst = 0.0;
    FlowSolution donor;
    for (int b = 0; b < solution.d(); ++b) {
        Vec e = Vec::Zero(solution.d());
        e[b] = fd_step;
        double vp = value_at_shifted_probe(model, cascade, solution, x0 + e, opts, &donor);
        double vm = value_at_shifted_probe(model, cascade, solution, x0 - e, opts, &donor);
        worst = std::max(worst, std::fabs((vp - vm) / (2.0 * fd_step) - z0[b]));
    }
    return worst;
}

SolutionFactory make_solution_factory(const CoefficientModel& model,
                                      const ConstantCascade& cascade, double T, double dt,
                                      const SolverOptions& opts) {
    if (!std::isfinite(T) || !(dt > 0.0))
        throw ConfigError("make_solution_factory: needs a finite horizon and dt > 0");
    SolutionFactory factory;
    factory.horizon = T;
    factory.dt = dt;
    factory.solve = [model, cascade, T, dt, opts](double t, const EmpiricalMeasure& m,
                                                  const FlowSolution* warm) {
        SolverOptions o = opts;
        o.warm_start = warm;
        return solve_global(model, cascade, m, t, T, dt, o);
    };
    return factory;
}

double master_residual(const CoefficientModel& model, const SolutionFactory& factory,
                       double t, const Vec& x, const EmpiricalMeasure& m,
                       const FdSteps& fd, ValueRecord* record) {
    if (!factory.solve || !(factory.dt > 0.0))
        throw ConfigError("master_residual: factory has no solve or no dt");
    if (m.n_points() < 1) throw ConfigError("master_residual: m has no points");
    if (int(x.size()) != m.dim())
        throw ConfigError("master_residual: x dimension does not match m");
    if (fd.t_steps < 2 || fd.t_steps % 2 != 0)
        throw ConfigError("master_residual: t_steps must be a positive even step count");
    if (!(fd.m > 0.0)) throw ConfigError("master_residual: fd.m must be positive");

    const double scale = std::max(1.0, std::fabs(factory.horizon));
    if (t > factory.horizon + 1e-12 * scale)
        throw ConfigError("master_residual: t is past the horizon");

    if (t >= factory.horizon - 1e-12 * scale) {
        // On the terminal slice the value is the terminal cost by
        // construction, so the defect of the terminal condition is zero
        // without any solve.
        if (record) {
            record->V = model.k(x, m);
            record->dxV = model.dx_k(x, m);
            record->dtV = 0.0;
            record->dmV.clear();
            record->residual = 0.0;
            record->quadrature = "terminal";
        }
        return 0.0;
    }

    const double dt_fd = fd.t_steps * factory.dt;
    if (!(t + dt_fd < factory.horizon))
        throw ConfigError("master_residual: time difference step crosses the horizon");

    EmpiricalMeasure probed = m.with_probes(x.transpose());
    const int pr = m.n_points();
    const int N = m.n_points();
    const int d = int(x.size());

    FlowSolution base = factory.solve(t, probed, nullptr);
    std::string quadrature;
    const double V = value(model, base, pr, &quadrature);
    const Vec dxV = base.Z[0].row(pr).transpose();
    const Vec f_x = base.dXds[0].row(pr).transpose();
    const double g_x = model.g(x, base.measure_at(0), base.A[0].row(pr).transpose());

    // The shifted-time solves live on different grids, so the donor is
    // dropped by the factory on its own; the particle nudges share the base
    // solve's layout and start warm from it.
    const double v_up = value(model, factory.solve(t + dt_fd, probed, &base), pr);
    const double v_dn = value(model, factory.solve(t - dt_fd, probed, &base), pr);
    const double dtV = (v_up - v_dn) / (2.0 * dt_fd);

    std::vector<Vec> dmV(std::size_t(N), Vec::Zero(d));
    double coupling = 0.0;
    for (int j = 0; j < N; ++j) {
        const double wj = m.weights()[j];
        for (int b = 0; b < d; ++b) {
            auto nudged = [&](double shift) {
                Mat pts = m.points();
                pts(j, b) += shift;
                EmpiricalMeasure moved(std::move(pts), m.weights(), x.transpose());
                return value(model, factory.solve(t, moved, &base), pr);
            };
            dmV[std::size_t(j)][b] = (nudged(fd.m) - nudged(-fd.m)) / (2.0 * fd.m * wj);
        }
        coupling += wj * dmV[std::size_t(j)].dot(base.dXds[0].row(j).transpose());
    }

    const double residual = dtV + f_x.dot(dxV) + g_x + coupling;
    if (record) {
        record->V = V;
        record->dxV = dxV;
        record->dtV = dtV;
        record->dmV = std::move(dmV);
        record->residual = residual;
        record->quadrature = quadrature;
    }
    return std::fabs(residual);
}

std::vector<Mat> time_derivative_of_flow(const CoefficientModel& model,
                                         const ConstantCascade& cascade,
                                         const FlowSolution& solution,
                                         const SolverOptions& opts) {
    const int n = solution.grid.n_steps;
    if (n < 2) throw ConfigError("time_derivative_of_flow: needs at least two grid steps");
    const double h = solution.grid.dt();
    const double t0 = solution.grid.t_start;
    const double T = solution.grid.t_end;

    FlowSolution later = solve_global(model, cascade, solution.m0, t0 + h, T, h, opts);
    FlowSolution earlier = solve_global(model, cascade, solution.m0, t0 - h, T, h, opts);
    if (later.grid.n_steps != n - 1 || earlier.grid.n_steps != n + 1)
        throw ConfigError("time_derivative_of_flow: shifted solves missed the grid");

    std::vector<Mat> dtX(std::size_t(n) + 1);
    dtX[0] = -solution.dXds[0];
    for (int i = 1; i <= n; ++i)
        dtX[std::size_t(i)] =
            (later.X[std::size_t(i - 1)] - earlier.X[std::size_t(i + 1)]) / (2.0 * h);
    return dtX;
}

double dtV_closed_form(const CoefficientModel& model, const FlowSolution& solution,
                       const std::vector<Mat>& dtX, int row, std::string* quadrature) {
    require_row(solution, row, "dtV_closed_form");
    const int n = solution.grid.n_steps;
    if (int(dtX.size()) != n + 1)
        throw ConfigError("dtV_closed_form: dtX does not match the solution grid");

    const Eigen::VectorXd& w = solution.m0.weights();
    const int N = solution.m0.n_points();
    std::vector<double> qw = quad_weights(n, solution.grid.dt(), quadrature);

    double integral = 0.0;
    for (int i = 0; i <= n; ++i) {
        if (qw[std::size_t(i)] == 0.0) continue;
        const EmpiricalMeasure mu = solution.measure_at(i);
        const Vec xi = solution.X[std::size_t(i)].row(row).transpose();
        const Vec zi = solution.Z[std::size_t(i)].row(row).transpose();
        const Vec ai = solution.A[std::size_t(i)].row(row).transpose();
        double node = 0.0;
        for (int l = 0; l < N; ++l) {
            const Vec xl = solution.X[std::size_t(i)].row(l).transpose();
            Vec coupling = model.dmu_g(xi, mu, ai, xl) + model.dmu_f(xi, mu, ai, xl) * zi;
            node += w[l] * coupling.dot(dtX[std::size_t(i)].row(l).transpose());
        }
        integral += qw[std::size_t(i)] * node;
    }

    const EmpiricalMeasure mu_T = solution.measure_at(n);
    const Vec xT = solution.X[std::size_t(n)].row(row).transpose();
    double terminal = 0.0;
    for (int l = 0; l < N; ++l)
        terminal += w[l] * model.dmu_k(xT, mu_T, solution.X[std::size_t(n)].row(l).transpose())
                              .dot(dtX[std::size_t(n)].row(l).transpose());

    const EmpiricalMeasure mu_0 = solution.measure_at(0);
    const Vec x0 = solution.X[0].row(row).transpose();
    const Vec z0 = solution.Z[0].row(row).transpose();
    const Vec a0 = solution.A[0].row(row).transpose();
    const double boundary = -(z0.dot(solution.dXds[0].row(row).transpose()) +
                              model.g(x0, mu_0, a0));

    return integral + terminal + boundary;
}

Vec dmV_closed_form(const CoefficientModel& model, const FlowSolution& solution,
                    const JacobianFlow& jac_x, const JacobianFlow& jac_m, int row,
                    std::string* quadrature) {
    require_row(solution, row, "dmV_closed_form");
    const int n = solution.grid.n_steps;
    const int j = jac_m.slice;
    if (jac_x.slice != -1 || int(jac_x.dX.size()) != n + 1)
        throw ConfigError("dmV_closed_form: jac_x is not a state-direction flow on this grid");
    if (j < 0 || j >= solution.m0.n_points() || int(jac_m.dX.size()) != n + 1)
        throw ConfigError("dmV_closed_form: jac_m is not a measure-direction flow on this grid");

    const Eigen::VectorXd& w = solution.m0.weights();
    const int N = solution.m0.n_points();
    const int d = solution.d();
    std::vector<double> qw = quad_weights(n, solution.grid.dt(), quadrature);

    Vec integral = Vec::Zero(d);
    for (int i = 0; i <= n; ++i) {
        if (qw[std::size_t(i)] == 0.0) continue;
        const EmpiricalMeasure mu = solution.measure_at(i);
        const Vec xi = solution.X[std::size_t(i)].row(row).transpose();
        const Vec zi = solution.Z[std::size_t(i)].row(row).transpose();
        const Vec ai = solution.A[std::size_t(i)].row(row).transpose();
        Vec node = Vec::Zero(d);
        for (int l = 0; l < N; ++l) {
            const Vec xl = solution.X[std::size_t(i)].row(l).transpose();
            Vec coupling = model.dmu_f(xi, mu, ai, xl) * zi + model.dmu_g(xi, mu, ai, xl);
            node += w[l] * (jac_m.dX[std::size_t(i)][std::size_t(l)] * coupling);
            if (l == j) node += jac_x.dX[std::size_t(i)][std::size_t(j)] * coupling;
        }
        integral += qw[std::size_t(i)] * node;
    }

    const EmpiricalMeasure mu_T = solution.measure_at(n);
    const Vec xT = solution.X[std::size_t(n)].row(row).transpose();
    Vec terminal = Vec::Zero(d);
    for (int l = 0; l < N; ++l) {
        Vec grad = model.dmu_k(xT, mu_T, solution.X[std::size_t(n)].row(l).transpose());
        terminal += w[l] * (jac_m.dX[std::size_t(n)][std::size_t(l)] * grad);
        if (l == j) terminal += jac_x.dX[std::size_t(n)][std::size_t(j)] * grad;
    }

    return integral + terminal;
}

}  // namespace mfg
