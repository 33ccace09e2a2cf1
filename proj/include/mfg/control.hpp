#pragma once

#include <Eigen/Cholesky>

#include "mfg/cascade.hpp"
#include "mfg/model.hpp"

namespace mfg {

struct ControlOptions {
    double newton_tol = 1e-12;
    int newton_max = 50;
};

struct ControlSolve {
    Vec alpha_hat;
    double residual = 0.0;        // |da_f . z + da_g| at alpha_hat
    int iterations = 0;
    double hessian_min_eig = 0.0;  // smallest eigenvalue of H at alpha_hat
    bool in_cone = true;           // cone status of the query point (advisory)
};

struct ConeReport {
    bool inside = false;
    double margin = 0.0;  // cone_radius(|x|, ||mu||_1) - |z|
};

ConeReport cone_check(const ConstantCascade& cascade, const Vec& x,
                      const EmpiricalMeasure& mu, const Vec& z);

// Newton iteration on the first-order condition da_f(x,mu,a) z + da_g(x,mu,a)
// = 0 with the exact Hessian H = dada_f_dot(z) + dada_g. No line search; on a
// residual increase the step is bisected until the residual drops. Querying
// outside the cone is flagged, not fatal. Throws NewtonDiverged /
// SingularHessian.
ControlSolve solve_control(const CoefficientModel& model, const ConstantCascade& cascade,
                           const Vec& x, const EmpiricalMeasure& mu, const Vec& z,
                           const Vec* warm_start = nullptr, const ControlOptions& opts = {});

// Derivatives of the minimizer via the implicit function theorem, all from
// one factorization of H. Index convention: (i,j) = d alpha_j / d input_i.
struct ControlDerivatives {
    Vec alpha_hat;
    Mat hessian;   // d_a by d_a
    Mat dz_alpha;  // d_x by d_a
    Mat dx_alpha;  // d_x by d_a
    Eigen::LDLT<Mat> hessian_ldlt;
};

ControlDerivatives control_derivatives(const CoefficientModel& model,
                                       const ConstantCascade& cascade, const Vec& x,
                                       const EmpiricalMeasure& mu, const Vec& z,
                                       const Vec* warm_start = nullptr,
                                       const ControlOptions& opts = {});

// Measure direction: (i,j) = [d_mu alpha_j (xt)]_i, reusing the factorization.
Mat dmu_alpha(const CoefficientModel& model, const ControlDerivatives& cd, const Vec& x,
              const EmpiricalMeasure& mu, const Vec& z, const Vec& xt);

struct CoercivityReport {
    double worst = 0.0;   // largest eigenvalue of sym(dz_alpha . da_f) seen
    double bound = 0.0;   // -lambda_f^2 / (Lambda_g + lambda_g / 20)
    bool pass = false;
    int samples = 0;
    Vec witness_x, witness_z;
};

// Samples cone points and checks that the Hamiltonian's z-curvature matrix
// dz_alpha . da_f stays below -lambda_z as a quadratic form.
CoercivityReport coercivity_check(const CoefficientModel& model,
                                  const ConstantCascade& cascade, int sample_budget = 1000);

}  // namespace mfg
