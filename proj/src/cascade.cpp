#include "mfg/cascade.hpp"

#include <cmath>

#include "mfg/errors.hpp"

namespace mfg {

double ConstantCascade::jacobian_m_growth(double tau) const {
    const double b = L_Bp * tau;
    const double e = std::exp(2.0 * b);
    return b * (b * e + 1.0) * e;
}

void ConstantCascade::validate() const {
    if (!(Lstar0 >= std::sqrt(3.0) * model_constants.Lambda_k * (1.0 - 1e-12)))
        throw ConfigError("ConstantCascade: Lstar0 must dominate sqrt(3) Lambda_k");
    if (k0 != 4.0 * std::max(model_constants.Lambda_k, Lstar0))
        throw ConfigError("ConstantCascade: k0 must equal 4 max{Lambda_k, Lstar0}");
    if (!(lambda1 <= model_constants.lambda_g - model_constants.l_g + 1e-15))
        throw ConfigError("ConstantCascade: lambda1 must not exceed lambda_g - l_g");
    if (!(eps1 > 0.0 && eps2 > 0.0 && lambda_z > 0.0 && lambda_x > 0.0 && lambda1 > 0.0 &&
          lambda2 > 0.0))
        throw ConfigError("ConstantCascade: derived rates must be positive");
}

CascadeInputs cascade_inputs(const CoefficientModel& model) {
    model.validate();
    CascadeInputs in;
    in.constants = model.constants;
    in.d_x = model.d_x;
    const Vec x0 = Vec::Zero(model.d_x);
    const Vec a0 = Vec::Zero(model.d_alpha);
    const EmpiricalMeasure d0 = EmpiricalMeasure::dirac(x0);
    in.f0_norm = model.f(x0, d0, a0).norm();
    in.dxg0_norm = model.dx_g(x0, d0, a0).norm();
    in.dag0_norm = model.da_g(x0, d0, a0).norm();
    in.dxk0_norm = model.dx_k(x0, d0).norm();

    // alpha_hat(0, delta_0, 0): since z = 0 the first-order condition is
    // da_g(0, delta_0, alpha) = 0; a plain Newton suffices here.
    Vec a = a0;
    for (int it = 0; it < 50; ++it) {
        const Vec r = model.da_g(x0, d0, a);
        if (r.norm() <= 1e-12) break;
        a -= model.dada_g(x0, d0, a).ldlt().solve(r);
    }
    in.alpha0_norm = a.norm();
    return in;
}

ConstantCascade compute_cascade(const CascadeInputs& in, const CascadeOptions& opts) {
    in.constants.validate();
    const ModelConstants& c = in.constants;
    ConstantCascade out;
    out.model_constants = c;
    out.d_x = in.d_x;

    out.lambda_z = c.lambda_f * c.lambda_f / (c.Lambda_g + c.lambda_g / 20.0);
    out.lambda_x = 0.8 * c.lambda_g;

    if (opts.lambda1_override && opts.lambda2_override) {
        out.theta = 0.0;
        out.lambda1 = *opts.lambda1_override;
        out.lambda2 = *opts.lambda2_override;
        if (!(out.lambda1 > 0.0 && out.lambda1 <= c.lambda_g - c.l_g))
            throw ConfigError("compute_cascade: lambda1 override outside (0, lambda_g - l_g]");
        if (!(out.lambda2 > 0.0 && out.lambda2 <= out.lambda_z))
            throw ConfigError("compute_cascade: lambda2 override outside (0, lambda_z]");
    } else if (opts.lambda1_override || opts.lambda2_override) {
        throw ConfigError("compute_cascade: lambda1 and lambda2 must be overridden together");
    } else {
        const double s = c.Lambda_2 + 0.25 * c.Lambda_1;
        const double lhs = s * s;
        const double rhs = 4.0 * (c.lambda_g - c.l_g) * out.lambda_z;
        if (!(lhs < rhs))
            throw H2SufficientConditionFails(
                "compute_cascade: (Lambda_2 + Lambda_1/4)^2 = " + std::to_string(lhs) +
                " >= 4 (lambda_g - l_g) lambda_z = " + std::to_string(rhs));
        out.theta = std::sqrt(lhs / rhs);
        out.lambda1 = (1.0 - out.theta) * (c.lambda_g - c.l_g);
        out.lambda2 = (1.0 - out.theta) * out.lambda_z;
    }

    out.Lambda_h = c.Lambda_g + 0.05 * std::min(out.lambda1, c.lambda_g);

    out.Lstar1 = std::max({c.Lambda_k * c.Lambda_k / c.lambda_k,
                           (out.Lambda_h + 0.05 * c.lambda_g) / out.lambda_z,
                           (2.5 * c.Lambda_f + out.Lambda_h + 0.05 * c.lambda_g) / out.lambda_x});

    out.eps1 = std::min({0.5 * (c.lambda_k - c.l_k), 0.5 * out.lambda2, 0.4 * out.lambda1});
    out.lbar_k = 0.5 * (c.lambda_k - c.l_k);
    out.lbar_z = 0.5 * out.lambda2;
    out.lbar_x = 0.4 * out.lambda1;

    out.Lstar2 = std::max({6.0 * c.Lambda_k * c.Lambda_k / out.lbar_k,
                           (2.0 * c.Lambda_g + 0.1 * c.lambda_g) / out.lbar_x,
                           (1.25 * c.Lambda_f + 3.0 * c.Lambda_g + 0.3 * c.lambda_g) /
                               out.lbar_z});

    const double q = c.Lambda_g + 0.1 * c.lambda_g;
    out.Lstar3 = std::max(
        (3.0 + out.Lstar2 / (4.0 * out.eps1)) * c.Lambda_k * c.Lambda_k / c.lambda_k,
        (q + (out.Lstar2 / (4.0 * out.eps1)) *
                 ((25.0 / 16.0) * c.Lambda_f * c.Lambda_f + q * q)) /
            out.lambda_x);
    out.Lstar4 = std::max(c.Lambda_k * c.Lambda_k / (4.0 * out.eps1 * c.lambda_k),
                          ((25.0 / 16.0) * c.Lambda_f * c.Lambda_f + q * q) /
                              (4.0 * out.eps1 * out.lambda_x));

    out.eps2 = std::min({0.25 * c.lambda_k, 0.25 * out.lambda_z, 0.125 * c.lambda_g});
    out.Lstar5 = std::max(c.Lambda_k * c.Lambda_k / (4.0 * out.eps2 * out.lbar_k),
                          ((25.0 / 16.0) * c.Lambda_f * c.Lambda_f +
                           c.lambda_g * c.lambda_g / 400.0) /
                              (4.0 * out.eps2 * out.lbar_x));

    out.Lstar6 = std::max({6.0 * c.Lambda_k * c.Lambda_k / c.lambda_k,
                           2.0 * (1.25 * c.Lambda_f + 3.0 * c.Lambda_g + 0.3 * c.lambda_g) /
                               out.lambda_z,
                           2.0 * q / c.lambda_g, 3.0 * c.Lambda_k * c.Lambda_k / out.lbar_k,
                           q / out.lbar_x, 3.0 * c.Lambda_k * c.Lambda_k / c.lambda_k,
                           q / out.lambda_x});

    out.Lstar0 =
        double(in.d_x) *
        std::max(out.Lstar1, std::sqrt((out.Lstar4 * (2.0 + out.Lstar5) + 1.0) * out.Lstar1 *
                                       out.Lstar6));
    out.k0 = 4.0 * std::max(c.Lambda_k, out.Lstar0);

    out.L_f = std::max(c.Lambda_f, in.f0_norm);
    out.L_g = std::max({in.dxg0_norm, in.dag0_norm, c.Lambda_g, c.lbar_g});
    out.L_k = std::max(in.dxk0_norm, c.Lambda_k);

    out.L_alpha = std::max({20.0 * c.Lambda_f / (19.0 * c.lambda_g),
                            20.0 * (c.lbar_g + 0.5 * out.k0 * c.lbar_f) / (19.0 * c.lambda_g),
                            in.alpha0_norm});
    out.Lbar_p = std::max(c.Lambda_k, out.Lstar0);
    out.L_B = out.L_f * (1.0 + out.L_alpha + 2.0 * out.Lbar_p * out.L_alpha);
    out.L_Bp = c.Lambda_f * (1.0 + out.L_alpha + out.Lstar0 * out.L_alpha);

    out.validate();
    return out;
}

ConstantCascade compute_cascade(const CoefficientModel& model, const CascadeOptions& opts) {
    return compute_cascade(cascade_inputs(model), opts);
}

}  // namespace mfg
