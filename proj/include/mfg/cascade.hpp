#pragma once

#include <optional>

#include "mfg/model.hpp"

namespace mfg {

struct CascadeOptions {
    // Manual h2 constants. When both are set the closed-form sufficient
    // condition is skipped (for models whose h2 certificate comes from
    // elsewhere, e.g. a separable Hamiltonian).
    std::optional<double> lambda1_override;
    std::optional<double> lambda2_override;
};

// Origin evaluations of a model that feed the derived constants.
struct CascadeInputs {
    ModelConstants constants;
    int d_x = 1;
    double f0_norm = 0.0;    // |f(0, delta_0, 0)|
    double dxg0_norm = 0.0;  // |dx_g(0, delta_0, 0)|
    double dag0_norm = 0.0;  // |da_g(0, delta_0, 0)|
    double dxk0_norm = 0.0;  // |dx_k(0, delta_0)|
    double alpha0_norm = 0.0;  // |alpha_hat(0, delta_0, 0)|
};

// The full chain of derived constants: cone radius, Lipschitz budget of the
// decoupling field, growth rates of the flow jacobians. Pure function of the
// declared model constants plus a handful of origin evaluations.
struct ConstantCascade {
    ModelConstants model_constants;
    int d_x = 1;

    double lambda_z = 0, lambda_x = 0;
    double theta = 0;  // 0 when lambda1/lambda2 were overridden
    double lambda1 = 0, lambda2 = 0;
    double Lambda_h = 0;
    double Lstar1 = 0;
    double eps1 = 0, lbar_k = 0, lbar_z = 0, lbar_x = 0;
    double Lstar2 = 0, Lstar3 = 0, Lstar4 = 0;
    double eps2 = 0;
    double Lstar5 = 0, Lstar6 = 0, Lstar0 = 0;
    double k0 = 0;
    double L_f = 0, L_g = 0, L_k = 0;
    double L_alpha = 0;
    double Lbar_p = 0;
    double L_B = 0, L_Bp = 0;

    // Costate cone: |z| <= cone_radius(|x|, ||mu||_1) must hold along flows.
    double cone_radius(double x_norm, double mu_norm1) const {
        return 0.5 * k0 * (1.0 + x_norm + mu_norm1);
    }

    // Growth envelope of the measure-direction jacobian over a horizon tau.
    double jacobian_m_growth(double tau) const;

    void validate() const;  // throws ConfigError on a broken invariant
};

CascadeInputs cascade_inputs(const CoefficientModel& model);

// Throws H2SufficientConditionFails when the closed-form condition
// (Lambda_2 + Lambda_1/4)^2 < 4 (lambda_g - l_g) lambda_z is violated and no
// override is supplied.
ConstantCascade compute_cascade(const CascadeInputs& in, const CascadeOptions& opts = {});
ConstantCascade compute_cascade(const CoefficientModel& model, const CascadeOptions& opts = {});

}  // namespace mfg
