#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mfg/cascade.hpp"
#include "mfg/control.hpp"
#include "mfg/model.hpp"

namespace mfg {

struct TimeGrid {
    double t_start = 0.0;
    double t_end = 1.0;
    int n_steps = 1;

    TimeGrid() = default;
    TimeGrid(double t0, double t1, int n);  // uniform; validates t0 < t1, n >= 1

    double dt() const { return (t_end - t_start) / n_steps; }
    int n_nodes() const { return n_steps + 1; }
    double node(int i) const {
        return i == n_steps ? t_end : t_start + dt() * double(i);
    }
};

// Batch terminal costate: maps the arrived cloud (points and probes moved to
// the final time) to one costate row per cloud row. tol_hint tells recursive
// terminal conditions how accurately the caller currently needs the value;
// analytic terminal conditions ignore it.
using TerminalMap =
    std::function<Eigen::MatrixXd(const EmpiricalMeasure& arrived, double tol_hint)>;

// Pointwise terminal condition p(x, mu), lifted row-by-row.
using TerminalPointwise =
    std::function<Vec(const Vec& x, const EmpiricalMeasure& mu)>;

TerminalMap lift_terminal(const CoefficientModel& model, TerminalPointwise p);
TerminalMap terminal_from_dx_k(const CoefficientModel& model);

struct FlowSolution;

struct SolverOptions {
    double picard_tol = 1e-10;
    int picard_max = 200;
    double damping = 1.0;  // fraction of the new iterate kept per sweep
    double epsilon_init = 0.5;
    double epsilon_min = 1.0 / 64.0;
    ControlOptions control;
    // Optional donor for re-solves of slightly perturbed data (e.g. finite
    // differences): a converged solution of the same model on the same grid
    // with the same row layout. The solve adopts the donor's partition and
    // starts every interval from its field, which typically cuts the sweep
    // count by a few x. A donor whose grid or row layout does not match is
    // ignored, so perturbations that change the grid fall back to a cold
    // start on their own. The donor must outlive the call.
    const FlowSolution* warm_start = nullptr;
};

// Characteristic flow of one solve: node-major arrays, one row per particle
// (points of the initial measure first, probes after).
struct FlowSolution {
    TimeGrid grid;
    EmpiricalMeasure m0;
    std::vector<Eigen::MatrixXd> X;     // state rows per node
    std::vector<Eigen::MatrixXd> Z;     // costate rows per node
    std::vector<Eigen::MatrixXd> A;     // control rows per node
    std::vector<Eigen::MatrixXd> dXds;  // forward RHS at nodes (dense-output slopes)
    std::vector<Eigen::MatrixXd> dZds;  // costate RHS at nodes

    double terminal_residual = 0.0;
    int picard_iterations = 0;               // sweeps, summed over intervals
    std::vector<double> interval_boundaries; // pasting boundaries, ascending
    std::vector<int> interval_sweeps;        // Picard sweeps per interval
    bool cone_ok = true;
    double worst_cone_margin = 0.0;

    int n_rows() const { return int(m0.n_rows()); }
    int d() const { return int(m0.dim()); }
    // Cloud at a node: probes ride along, weights are those of m0.
    EmpiricalMeasure measure_at(int node) const;
};

// One backward interval: Picard iteration coupling the forward RK4 state pass
// (stage costates from cubic Hermite dense output of the previous iterate)
// with the backward RK4 costate pass (stage states from Hermite dense output
// of the current forward pass). Throws PicardDiverged / NewtonDiverged.
FlowSolution solve_local(const CoefficientModel& model, const ConstantCascade& cascade,
                         const EmpiricalMeasure& m, const TimeGrid& grid,
                         const TerminalMap& terminal_p, const SolverOptions& opts = {});
FlowSolution solve_local(const CoefficientModel& model, const ConstantCascade& cascade,
                         const EmpiricalMeasure& m, const TimeGrid& grid,
                         const TerminalPointwise& terminal_p, const SolverOptions& opts = {});

// Whole-horizon solve by backward pasting: the horizon is sliced from the
// terminal side into intervals of length epsilon (adaptively halved on
// PicardDiverged, IntervalUnderflow below epsilon_min); each interval's
// terminal condition is the decoupling field of the chain after it,
// memoized per (interval, arrived-cloud) with warm starts.
FlowSolution solve_global(const CoefficientModel& model, const ConstantCascade& cascade,
                          const EmpiricalMeasure& m, double t0, double T, double dt,
                          const SolverOptions& opts = {});

// Decoupling field gamma(t, x, m): x rides as a zero-weight probe.
Vec eval_gamma(const CoefficientModel& model, const ConstantCascade& cascade, double t,
               const Vec& x, const EmpiricalMeasure& m, double T, double dt,
               const SolverOptions& opts = {});

// Re-solves from (s, X_s # m) and returns the worst row discrepancy of the
// re-solved states at tau against the stored ones. s and tau must lie on the
// grid of `solution`.
double flow_property_check(const CoefficientModel& model, const ConstantCascade& cascade,
                           const FlowSolution& solution, double t, double s, double tau,
                           const SolverOptions& opts = {});

// Derivatives of the flow along the stored trajectory. Index convention:
// value(i, j) = d out_j / d in_i.
struct JacobianFlow {
    TimeGrid grid;
    int slice = -1;  // particle index for the measure direction, -1 for state
    // [node][row] matrices, d by d.
    std::vector<std::vector<Mat>> dX;
    std::vector<std::vector<Mat>> dZ;
};

struct JacobianOptions {
    double tol = 1e-12;
    int max_sweeps = 400;
    double damping = 1.0;
    long long storage_cap = 1 << 26;  // doubles; CapExceeded beyond this
};

// State direction: per-row linearization at fixed measure, pasted along the
// stored interval structure, so it is available on any horizon the solver
// handled. dX starts at the identity, dZ ends at dxdx_k dX(T).
JacobianFlow jacobian_flow_x(const CoefficientModel& model, const ConstantCascade& cascade,
                             const FlowSolution& solution, const JacobianOptions& opts = {});

// Measure direction for source particle j: the coupled linearization of the
// whole particle system under a nudge of particle j's initial position,
// weight-rescaled to the Lions derivative. Solved by damped Picard over the
// full horizon (pass damping < 1 on horizons where the undamped iteration
// diverges). Needs the state-direction flow of particle j to subtract the
// transport term.
JacobianFlow jacobian_flow_m(const CoefficientModel& model, const ConstantCascade& cascade,
                             const FlowSolution& solution, int j,
                             const JacobianFlow& jac_x, const JacobianOptions& opts = {});

// Fixed-point defect of a converged solution: replays the forward pass from
// the stored costate field and takes the worst node-wise W1 distance between
// the replayed and stored clouds.
double nash_gap(const CoefficientModel& model, const ConstantCascade& cascade,
                const FlowSolution& solution, const SolverOptions& opts = {});

// Node-major dump: "s,id,kind,X_1..X_d,Z_1..Z_d,alpha_1..alpha_da", one row
// per (node, particle), 17 significant digits.
std::string trajectory_csv(const FlowSolution& solution);

}  // namespace mfg
