#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>

#include "mfg/measure.hpp"

namespace mfg {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Declared structural constants of a coefficient model. The solver and the
// audit consume these; the audit additionally re-checks them by sampling.
struct ModelConstants {
    double lambda_f = 0;  // ellipticity of (da_f)(da_f)^T
    double Lambda_1 = 0;  // bound on ||da_f||
    double Lambda_2 = 0;  // bound on ||dmu_f||
    double Lambda_3 = 0;  // bound on ||dx_f||
    double Lambda_f = 0;  // max of the three above
    double lbar_f = 0;    // weighted bound on second derivatives of f
    double lambda_g = 0;  // convexity of g in alpha and in x
    double Lambda_g = 0;  // bound on ||dada_g||, ||dmudx_g||, ||dxdx_g||
    double l_g = 0;       // monotonicity defect of g in mu (l_g < lambda_g)
    double lbar_g = 0;    // bound on ||dxda_g||, ||dmuda_g||
    double lambda_k = 0;  // convexity of k in x
    double Lambda_k = 0;  // bound on ||dmudx_k||, ||dxdx_k||
    double l_k = 0;       // monotonicity defect of k in mu (l_k < lambda_k)

    void validate() const;  // throws ConfigError on a violated invariant
};

// Coefficient bundle (f, g, k) with first and second derivatives and the
// declared constants. All second derivatives of f come pre-contracted with a
// costate vector v to avoid rank-3 tensors.
//
// Matrix conventions (column vectors throughout):
//   dx_f(i,j)   = d f_j / d x_i                   (d_x by d_x)
//   da_f(i,j)   = d f_j / d a_i                   (d_a by d_x)
//   dmu_f(xt)(i,j) = d/d xt_i of the measure derivative of f_j at xt
//                                                  (d_x by d_x)
//   dxdx_f_dot(v)  = sum_k v_k dxdx f_k            (d_x by d_x)
//   dada_f_dot(v)  = sum_k v_k dada f_k            (d_a by d_a)
//   dxda_f_dot(v)(i,j)  = sum_k v_k d2 f_k / (dx_i da_j)   (d_x by d_a)
//   dmudx_f_dot(xt,v)(i,j) = sum_k v_k d/dxt_i d/dx_j [measure deriv of f_k]
//   dmuda_f_dot(xt,v)(i,j) = sum_k v_k d/dxt_i d/da_j [measure deriv of f_k]
// Scalar costs use plain gradients/Hessians with the same index order:
//   dxda_g(i,j) = d2 g / (dx_i da_j), dmudx_g(xt)(i,j) = d/dxt_i d/dx_j ...
//
// With these conventions the costate equation reads
//   dZ/ds = -(dx_f * Z + dx_g),
// and the control first-order condition reads da_f * z + da_g = 0.
struct CoefficientModel {
    std::string name;
    int d_x = 1;
    int d_alpha = 1;
    ModelConstants constants;

    using Meas = EmpiricalMeasure;

    std::function<Vec(const Vec&, const Meas&, const Vec&)> f;
    std::function<Mat(const Vec&, const Meas&, const Vec&)> dx_f;
    std::function<Mat(const Vec&, const Meas&, const Vec&)> da_f;
    std::function<Mat(const Vec&, const Meas&, const Vec&, const Vec&)> dmu_f;
    std::function<Mat(const Vec&, const Meas&, const Vec&, const Vec&)> dxdx_f_dot;
    std::function<Mat(const Vec&, const Meas&, const Vec&, const Vec&)> dada_f_dot;
    std::function<Mat(const Vec&, const Meas&, const Vec&, const Vec&)> dxda_f_dot;
    std::function<Mat(const Vec&, const Meas&, const Vec&, const Vec&, const Vec&)> dmudx_f_dot;
    std::function<Mat(const Vec&, const Meas&, const Vec&, const Vec&, const Vec&)> dmuda_f_dot;

    std::function<double(const Vec&, const Meas&, const Vec&)> g;
    std::function<Vec(const Vec&, const Meas&, const Vec&)> dx_g;
    std::function<Vec(const Vec&, const Meas&, const Vec&)> da_g;
    std::function<Vec(const Vec&, const Meas&, const Vec&, const Vec&)> dmu_g;
    std::function<Mat(const Vec&, const Meas&, const Vec&)> dxdx_g;
    std::function<Mat(const Vec&, const Meas&, const Vec&)> dada_g;
    std::function<Mat(const Vec&, const Meas&, const Vec&)> dxda_g;
    std::function<Mat(const Vec&, const Meas&, const Vec&, const Vec&)> dmudx_g;
    std::function<Mat(const Vec&, const Meas&, const Vec&, const Vec&)> dmuda_g;

    std::function<double(const Vec&, const Meas&)> k;
    std::function<Vec(const Vec&, const Meas&)> dx_k;
    std::function<Vec(const Vec&, const Meas&, const Vec&)> dmu_k;
    std::function<Mat(const Vec&, const Meas&)> dxdx_k;
    std::function<Mat(const Vec&, const Meas&, const Vec&)> dmudx_k;

    void validate() const;  // throws ConfigError if a member is missing
};

// Parameters of the built-in non-linear-quadratic example model. Ranges:
// eps1 in (0, 0.01], eps2 in (0, 0.5], eps3 in (0, 0.125], eps4 in (0, 1).
struct NonLQExampleParams {
    double eps1 = 5e-8;
    double eps2 = 0.5;
    double eps3 = 5e-3;
    double eps4 = 0.5;

    void validate() const;  // throws ParamOutOfRange
};

// C^2 interaction kernel used by the non-LQ model: |y| outside (-1, 1),
// a quartic bridge inside. phi(y) >= |y| everywhere and |phi'| <= 1.
double phi(double y);
double phi_prime(double y);
double phi_double_prime(double y);

// Drift f = a, running cost g = (a^2 + x^2)/2, terminal cost k = x^2 / 2.
CoefficientModel lq_model();

// The non-LQ example: drift x + a + int y dmu + eps1 x E with
// E = exp(-x^2 - a^2 - (int phi dmu)^2); costs quadratic plus first-moment
// couplings (eps2, eps3, eps4). The declared lbar_f is a quasi-random
// sampled estimate of the second-derivative bound (with 5% headroom), not a
// proved supremum; the audit re-checks it as sampled-pass.
CoefficientModel nonlq_model(const NonLQExampleParams& params = {});

// f(x, mu, alpha) . z + g(x, mu, alpha)
double hamiltonian(const CoefficientModel& model, const Vec& x, const EmpiricalMeasure& mu,
                   const Vec& z, const Vec& alpha);

// Compares the analytic measure derivatives of f, g, k at particle j of mu
// against N-scaled central finite differences in that particle's position.
// Returns the largest absolute discrepancy across all components.
double check_l_derivative_identity(const CoefficientModel& model, const Vec& x,
                                   const EmpiricalMeasure& mu, const Vec& alpha, int j,
                                   double fd_step = 1e-6);

}  // namespace mfg
