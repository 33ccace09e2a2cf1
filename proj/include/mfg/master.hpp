#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mfg/cascade.hpp"
#include "mfg/model.hpp"
#include "mfg/solver.hpp"

namespace mfg {

// Value of the coupled system read at one (t, x, m), with the derivative
// slots filled by whichever operation produced the record. dxV is copied
// from the costate at (t, x), not differenced.
struct ValueRecord {
    double V = 0.0;
    Vec dxV;
    double dtV = 0.0;
    std::vector<Vec> dmV;    // per point particle, Lions-scaled
    double residual = 0.0;
    std::string quadrature;  // "simpson", "trapezoid", or "terminal"
};

// Rebuilds a converged solve from perturbed initial data: solve maps
// (t_start, initial cloud) to the flow on [t_start, horizon]. horizon and dt
// echo the construction so time perturbations can stay grid-aligned. warm
// may carry a nearby converged solution as a start field (nullptr for cold);
// factories that cannot exploit it are free to ignore it.
struct SolutionFactory {
    std::function<FlowSolution(double t, const EmpiricalMeasure& m, const FlowSolution* warm)>
        solve;
    double horizon = 0.0;
    double dt = 0.0;
};

SolutionFactory make_solution_factory(const CoefficientModel& model,
                                      const ConstantCascade& cascade, double T, double dt,
                                      const SolverOptions& opts = {});

// Step sizes for the finite differences in master_residual. The time step is
// a whole number of grid steps so the perturbed solves keep the node-count
// parity of the base solve (the quadrature rule switches on it).
struct FdSteps {
    int t_steps = 2;
    double m = 1e-4;
};

// Cost-to-go along the stored characteristic of one row, from a given node:
// terminal cost at the arrived cloud plus the running-cost integral over the
// remaining nodes. Composite Simpson when the remaining step count is even,
// trapezoid otherwise; the rule used is reported through `quadrature`.
double value_from(const CoefficientModel& model, const FlowSolution& solution, int row,
                  int node, std::string* quadrature = nullptr);
double value(const CoefficientModel& model, const FlowSolution& solution, int row,
             std::string* quadrature = nullptr);

// |central FD of value over the row's initial position minus Z at t|. The
// difference is taken on an appended probe copy of the row, so the measure
// (and every point trajectory) stays fixed while only the readout moves.
double check_dxV_equals_Z(const CoefficientModel& model, const ConstantCascade& cascade,
                          const FlowSolution& solution, int row, double fd_step = 1e-5,
                          const SolverOptions& opts = {});

// Left side of the backward equation for V at (t, x, m): dtV by central FD
// over two re-solves shifted fd.t_steps grid steps, dxV read off the costate
// exactly, dmV by Lions-scaled central FD over particle nudges. Probes of m
// are replaced by the single readout row x. At t == factory.horizon the
// value is the terminal cost by construction and the residual is exactly
// zero. Returns |residual|; the full record lands in *record when given.
double master_residual(const CoefficientModel& model, const SolutionFactory& factory,
                       double t, const Vec& x, const EmpiricalMeasure& m,
                       const FdSteps& fd = {}, ValueRecord* record = nullptr);

// d/dt of the flow map at fixed (x, m): node-major table of per-row
// derivatives of X with respect to the start time, from two re-solves
// shifted one grid step each way. Node 0 is the slope identity: the flow
// started an instant later is short exactly one forward step, so the
// derivative at the start node is minus the stored forward slope.
std::vector<Mat> time_derivative_of_flow(const CoefficientModel& model,
                                         const ConstantCascade& cascade,
                                         const FlowSolution& solution,
                                         const SolverOptions& opts = {});

// dtV at (t, row) assembled from the measure couplings and dtX:
//   integral over s of  sum_l w_l (dmu_g + dmu_f z)(X_l) . dtX_l
//   + sum_l w_l dmu_k(X_l(T)) . dtX_l(T)  -  (z . f + g) at the start node.
double dtV_closed_form(const CoefficientModel& model, const FlowSolution& solution,
                       const std::vector<Mat>& dtX, int row,
                       std::string* quadrature = nullptr);

// dmV(t, x_row, m)(y_j) for j = jac_m.slice, assembled from the flow
// jacobians: each measure coupling felt by the row is contracted with the
// response of the touched particle, the measure-direction part integrated
// against m and the transport part read at particle j itself:
//   integral over s of  [ sum_l w_l dmX_l (dmu_f z + dmu_g)(X_l)
//                         + dxX_j (dmu_f z + dmu_g)(X_j) ]
//   + sum_l w_l dmX_l(T) dmu_k(X_l(T)) + dxX_j(T) dmu_k(X_j(T)).
Vec dmV_closed_form(const CoefficientModel& model, const FlowSolution& solution,
                    const JacobianFlow& jac_x, const JacobianFlow& jac_m, int row,
                    std::string* quadrature = nullptr);

}  // namespace mfg
