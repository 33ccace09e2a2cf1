#include "mfg/model.hpp"

#include <cmath>

#include "mfg/errors.hpp"
#include "mfg/sobol.hpp"

namespace mfg {

namespace {

Vec vec1(double v) { return Vec::Constant(1, v); }
Mat mat1(double v) { return Mat::Constant(1, 1, v); }

// Measure functional ids shared across models (see cached_functional).
constexpr int kFunctionalFirstMoment = 1;  // int y dmu, first coordinate
constexpr int kFunctionalPhi = 2;          // int phi(y) dmu

double first_moment(const EmpiricalMeasure& mu) {
    return mu.cached_functional(kFunctionalFirstMoment,
                                [](const Vec& y) { return y[0]; });
}

double phi_moment(const EmpiricalMeasure& mu) {
    return mu.cached_functional(kFunctionalPhi, [](const Vec& y) { return phi(y[0]); });
}

}  // namespace

void ModelConstants::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0)) throw ConfigError(std::string("ModelConstants: ") + name +
                                          " must be positive");
    };
    positive(lambda_f, "lambda_f");
    positive(lambda_g, "lambda_g");
    positive(lambda_k, "lambda_k");
    positive(Lambda_g, "Lambda_g");
    positive(Lambda_k, "Lambda_k");
    auto nonneg = [](double v, const char* name) {
        if (!(v >= 0.0)) throw ConfigError(std::string("ModelConstants: ") + name +
                                           " must be nonnegative");
    };
    nonneg(Lambda_1, "Lambda_1");
    nonneg(Lambda_2, "Lambda_2");
    nonneg(Lambda_3, "Lambda_3");
    nonneg(lbar_f, "lbar_f");
    nonneg(lbar_g, "lbar_g");
    nonneg(l_g, "l_g");
    nonneg(l_k, "l_k");
    const double want = std::max({Lambda_1, Lambda_2, Lambda_3});
    if (std::abs(Lambda_f - want) > 1e-12)
        throw ConfigError("ModelConstants: Lambda_f must equal max{Lambda_1, Lambda_2, Lambda_3}");
    if (!(l_g < lambda_g))
        throw ConfigError("ModelConstants: need l_g < lambda_g");
    if (!(l_k < lambda_k))
        throw ConfigError("ModelConstants: need l_k < lambda_k");
}

void CoefficientModel::validate() const {
    if (d_x < 1 || d_alpha < 1)
        throw ConfigError("CoefficientModel: dimensions must be >= 1");
    const bool complete = f && dx_f && da_f && dmu_f && dxdx_f_dot && dada_f_dot &&
                          dxda_f_dot && dmudx_f_dot && dmuda_f_dot && g && dx_g && da_g &&
                          dmu_g && dxdx_g && dada_g && dxda_g && dmudx_g && dmuda_g && k &&
                          dx_k && dmu_k && dxdx_k && dmudx_k;
    if (!complete)
        throw ConfigError("CoefficientModel '" + name + "': missing coefficient callback");
    constants.validate();
}

void NonLQExampleParams::validate() const {
    if (!(eps1 > 0.0 && eps1 <= 0.01))
        throw ParamOutOfRange("nonlq: eps1 must lie in (0, 0.01]");
    if (!(eps2 > 0.0 && eps2 <= 0.5))
        throw ParamOutOfRange("nonlq: eps2 must lie in (0, 0.5]");
    if (!(eps3 > 0.0 && eps3 <= 0.125))
        throw ParamOutOfRange("nonlq: eps3 must lie in (0, 0.125]");
    if (!(eps4 > 0.0 && eps4 < 1.0))
        throw ParamOutOfRange("nonlq: eps4 must lie in (0, 1)");
}

double phi(double y) {
    const double a = std::abs(y);
    if (a >= 1.0) return a;
    const double y2 = y * y;
    return -y2 * y2 / 8.0 + 0.75 * y2 + 0.375;
}

double phi_prime(double y) {
    if (y >= 1.0) return 1.0;
    if (y <= -1.0) return -1.0;
    return -0.5 * y * y * y + 1.5 * y;
}

double phi_double_prime(double y) {
    if (std::abs(y) >= 1.0) return 0.0;
    return -1.5 * y * y + 1.5;
}

CoefficientModel lq_model() {
    CoefficientModel m;
    m.name = "lq";
    m.d_x = 1;
    m.d_alpha = 1;

    m.f = [](const Vec&, const EmpiricalMeasure&, const Vec& a) { return a; };
    m.dx_f = [](const Vec&, const EmpiricalMeasure&, const Vec&) { return mat1(0.0); };
    m.da_f = [](const Vec&, const EmpiricalMeasure&, const Vec&) { return mat1(1.0); };
    m.dmu_f = [](const Vec&, const EmpiricalMeasure&, const Vec&, const Vec&) {
        return mat1(0.0);
    };
    auto zero_dot = [](const Vec&, const EmpiricalMeasure&, const Vec&, const Vec&) {
        return mat1(0.0);
    };
    m.dxdx_f_dot = zero_dot;
    m.dada_f_dot = zero_dot;
    m.dxda_f_dot = zero_dot;
    auto zero_mu_dot = [](const Vec&, const EmpiricalMeasure&, const Vec&, const Vec&,
                          const Vec&) { return mat1(0.0); };
    m.dmudx_f_dot = zero_mu_dot;
    m.dmuda_f_dot = zero_mu_dot;

    m.g = [](const Vec& x, const EmpiricalMeasure&, const Vec& a) {
        return 0.5 * (a[0] * a[0] + x[0] * x[0]);
    };
    m.dx_g = [](const Vec& x, const EmpiricalMeasure&, const Vec&) { return vec1(x[0]); };
    m.da_g = [](const Vec&, const EmpiricalMeasure&, const Vec& a) { return vec1(a[0]); };
    m.dmu_g = [](const Vec&, const EmpiricalMeasure&, const Vec&, const Vec&) {
        return vec1(0.0);
    };
    m.dxdx_g = [](const Vec&, const EmpiricalMeasure&, const Vec&) { return mat1(1.0); };
    m.dada_g = [](const Vec&, const EmpiricalMeasure&, const Vec&) { return mat1(1.0); };
    m.dxda_g = [](const Vec&, const EmpiricalMeasure&, const Vec&) { return mat1(0.0); };
    m.dmudx_g = [](const Vec&, const EmpiricalMeasure&, const Vec&, const Vec&) {
        return mat1(0.0);
    };
    m.dmuda_g = [](const Vec&, const EmpiricalMeasure&, const Vec&, const Vec&) {
        return mat1(0.0);
    };

    m.k = [](const Vec& x, const EmpiricalMeasure&) { return 0.5 * x[0] * x[0]; };
    m.dx_k = [](const Vec& x, const EmpiricalMeasure&) { return vec1(x[0]); };
    m.dmu_k = [](const Vec&, const EmpiricalMeasure&, const Vec&) { return vec1(0.0); };
    m.dxdx_k = [](const Vec&, const EmpiricalMeasure&) { return mat1(1.0); };
    m.dmudx_k = [](const Vec&, const EmpiricalMeasure&, const Vec&) { return mat1(0.0); };

    ModelConstants& c = m.constants;
    c.lambda_f = 1.0;
    c.Lambda_1 = 1.0;
    c.Lambda_2 = 0.0;
    c.Lambda_3 = 0.0;
    c.Lambda_f = 1.0;
    c.lbar_f = 0.0;
    c.lambda_g = 1.0;
    c.Lambda_g = 1.0;
    c.l_g = 0.0;
    c.lbar_g = 0.0;
    c.lambda_k = 1.0;
    c.Lambda_k = 1.0;
    c.l_k = 0.0;
    return m;
}

namespace {

// Largest value of the weighted second-derivative bound of the non-LQ drift
// over a quasi-random sample. The bound's dependence on the measure factors
// through Phi = int phi dmu and ||mu||_1 <= Phi, so sampling (x, a, Phi, xt)
// with the worst case ||mu||_1 = Phi dominates every admissible cloud.
double sample_lbar_f(double eps1, int n_samples) {
    SobolSequence seq(4);
    Vec lo(4), hi(4);
    lo << -5.0, -5.0, 0.375, -5.0;
    hi << 5.0, 5.0, 5.0, 5.0;
    double worst = 0.0;
    for (int i = 0; i < n_samples; ++i) {
        const Vec q = seq.next_in(lo, hi);
        const double x = q[0], a = q[1], big_phi = q[2], xt = q[3];
        const double e = std::exp(-x * x - a * a - big_phi * big_phi);
        const double dp = phi_prime(xt);
        const double dada = std::abs(-2.0 * eps1 * (1.0 - 2.0 * a * a) * x * e);
        const double dxda = std::abs(-2.0 * eps1 * a * (1.0 - 2.0 * x * x) * e);
        const double dmuda = std::abs(4.0 * eps1 * dp * x * a * big_phi * e);
        const double dxdx = std::abs(-2.0 * eps1 * x * (3.0 - 2.0 * x * x) * e);
        const double dmudx = std::abs(-2.0 * eps1 * dp * (1.0 - 2.0 * x * x) * big_phi * e);
        const double weight = 1.0 + std::abs(x) + big_phi;
        worst = std::max(worst, std::max({dada, dxda, dmuda, dxdx, dmudx}) * weight);
    }
    return worst;
}

}  // namespace

CoefficientModel nonlq_model(const NonLQExampleParams& params) {
    params.validate();
    const double e1 = params.eps1, e2 = params.eps2, e3 = params.eps3, e4 = params.eps4;

    CoefficientModel m;
    m.name = "nonlq";
    m.d_x = 1;
    m.d_alpha = 1;

    auto envelope = [](double x, double a, const EmpiricalMeasure& mu) {
        const double p = phi_moment(mu);
        return std::exp(-x * x - a * a - p * p);
    };

    m.f = [e1, envelope](const Vec& x, const EmpiricalMeasure& mu, const Vec& a) {
        return vec1(x[0] + a[0] + first_moment(mu) + e1 * x[0] * envelope(x[0], a[0], mu));
    };
    m.dx_f = [e1, envelope](const Vec& x, const EmpiricalMeasure& mu, const Vec& a) {
        return mat1(1.0 + e1 * (1.0 - 2.0 * x[0] * x[0]) * envelope(x[0], a[0], mu));
    };
    m.da_f = [e1, envelope](const Vec& x, const EmpiricalMeasure& mu, const Vec& a) {
        return mat1(1.0 - 2.0 * e1 * a[0] * x[0] * envelope(x[0], a[0], mu));
    };
    m.dmu_f = [e1, envelope](const Vec& x, const EmpiricalMeasure& mu, const Vec& a,
                             const Vec& xt) {
        const double p = phi_moment(mu);
        return mat1(1.0 - 2.0 * e1 * phi_prime(xt[0]) * x[0] * p * envelope(x[0], a[0], mu));
    };
    m.dxdx_f_dot = [e1, envelope](const Vec& x, const EmpiricalMeasure& mu, const Vec& a,
                                  const Vec& v) {
        return mat1(-2.0 * e1 * x[0] * (3.0 - 2.0 * x[0] * x[0]) *
                    envelope(x[0], a[0], mu) * v[0]);
    };
    m.dada_f_dot = [e1, envelope](const Vec& x, const EmpiricalMeasure& mu, const Vec& a,
                                  const Vec& v) {
        return mat1(-2.0 * e1 * (1.0 - 2.0 * a[0] * a[0]) * x[0] *
                    envelope(x[0], a[0], mu) * v[0]);
    };
    m.dxda_f_dot = [e1, envelope](const Vec& x, const EmpiricalMeasure& mu, const Vec& a,
                                  const Vec& v) {
        return mat1(-2.0 * e1 * a[0] * (1.0 - 2.0 * x[0] * x[0]) *
                    envelope(x[0], a[0], mu) * v[0]);
    };
    m.dmudx_f_dot = [e1, envelope](const Vec& x, const EmpiricalMeasure& mu, const Vec& a,
                                   const Vec& xt, const Vec& v) {
        const double p = phi_moment(mu);
        return mat1(-2.0 * e1 * phi_prime(xt[0]) * (1.0 - 2.0 * x[0] * x[0]) * p *
                    envelope(x[0], a[0], mu) * v[0]);
    };
    m.dmuda_f_dot = [e1, envelope](const Vec& x, const EmpiricalMeasure& mu, const Vec& a,
                                   const Vec& xt, const Vec& v) {
        const double p = phi_moment(mu);
        return mat1(4.0 * e1 * phi_prime(xt[0]) * x[0] * a[0] * p *
                    envelope(x[0], a[0], mu) * v[0]);
    };

    m.g = [e2, e3](const Vec& x, const EmpiricalMeasure& mu, const Vec& a) {
        const double m1 = first_moment(mu);
        return 0.5 * a[0] * a[0] + 0.5 * x[0] * x[0] - e2 * x[0] * m1 + e3 * a[0] * m1;
    };
    m.dx_g = [e2](const Vec& x, const EmpiricalMeasure& mu, const Vec&) {
        return vec1(x[0] - e2 * first_moment(mu));
    };
    m.da_g = [e3](const Vec&, const EmpiricalMeasure& mu, const Vec& a) {
        return vec1(a[0] + e3 * first_moment(mu));
    };
    m.dmu_g = [e2, e3](const Vec& x, const EmpiricalMeasure&, const Vec& a, const Vec&) {
        return vec1(-e2 * x[0] + e3 * a[0]);
    };
    m.dxdx_g = [](const Vec&, const EmpiricalMeasure&, const Vec&) { return mat1(1.0); };
    m.dada_g = [](const Vec&, const EmpiricalMeasure&, const Vec&) { return mat1(1.0); };
    m.dxda_g = [](const Vec&, const EmpiricalMeasure&, const Vec&) { return mat1(0.0); };
    m.dmudx_g = [e2](const Vec&, const EmpiricalMeasure&, const Vec&, const Vec&) {
        return mat1(-e2);
    };
    m.dmuda_g = [e3](const Vec&, const EmpiricalMeasure&, const Vec&, const Vec&) {
        return mat1(e3);
    };

    m.k = [e4](const Vec& x, const EmpiricalMeasure& mu) {
        return 0.5 * x[0] * x[0] - e4 * x[0] * first_moment(mu);
    };
    m.dx_k = [e4](const Vec& x, const EmpiricalMeasure& mu) {
        return vec1(x[0] - e4 * first_moment(mu));
    };
    m.dmu_k = [e4](const Vec& x, const EmpiricalMeasure&, const Vec&) {
        return vec1(-e4 * x[0]);
    };
    m.dxdx_k = [](const Vec&, const EmpiricalMeasure&) { return mat1(1.0); };
    m.dmudx_k = [e4](const Vec&, const EmpiricalMeasure&, const Vec&) { return mat1(-e4); };

    ModelConstants& c = m.constants;
    c.lambda_f = 0.99;
    c.Lambda_1 = 1.005;
    c.Lambda_2 = 1.005;
    c.Lambda_3 = 1.02;
    c.Lambda_f = 1.02;
    c.lbar_f = 1.05 * sample_lbar_f(e1, 100000);
    c.lambda_g = 1.0;
    c.Lambda_g = 1.0;
    c.l_g = e2;
    c.lbar_g = e3;
    c.lambda_k = 1.0;
    c.Lambda_k = 1.0;
    c.l_k = e4;
    return m;
}

double hamiltonian(const CoefficientModel& model, const Vec& x, const EmpiricalMeasure& mu,
                   const Vec& z, const Vec& alpha) {
    return model.f(x, mu, alpha).dot(z) + model.g(x, mu, alpha);
}

double check_l_derivative_identity(const CoefficientModel& model, const Vec& x,
                                   const EmpiricalMeasure& mu, const Vec& alpha, int j,
                                   double fd_step) {
    if (j < 0 || j >= mu.n_points())
        throw ConfigError("check_l_derivative_identity: particle index out of range");
    const double wj = mu.weights()[j];
    if (!(wj > 0.0))
        throw ConfigError("check_l_derivative_identity: particle has zero weight");
    const int d = mu.dim();
    const Vec yj = mu.point(j);

    auto shifted = [&](int coord, double delta) {
        Eigen::MatrixXd pts = mu.points();
        pts(j, coord) += delta;
        return EmpiricalMeasure(std::move(pts), mu.weights(), mu.probes());
    };

    const Mat an_f = model.dmu_f(x, mu, alpha, yj);   // d by d_x
    const Vec an_g = model.dmu_g(x, mu, alpha, yj);   // d
    const Vec an_k = model.dmu_k(x, mu, yj);          // d

    double worst = 0.0;
    for (int c = 0; c < d; ++c) {
        const EmpiricalMeasure up = shifted(c, fd_step);
        const EmpiricalMeasure dn = shifted(c, -fd_step);
        // d/dy_j F(mu) = w_j * (measure derivative at y_j), so dividing the
        // finite difference by w_j recovers the derivative (N-scaling when
        // weights are uniform).
        const Vec fd_f = (model.f(x, up, alpha) - model.f(x, dn, alpha)) /
                         (2.0 * fd_step * wj);
        const double fd_g = (model.g(x, up, alpha) - model.g(x, dn, alpha)) /
                            (2.0 * fd_step * wj);
        const double fd_k = (model.k(x, up) - model.k(x, dn)) / (2.0 * fd_step * wj);
        worst = std::max(worst, (fd_f - an_f.row(c).transpose()).cwiseAbs().maxCoeff());
        worst = std::max(worst, std::abs(fd_g - an_g[c]));
        worst = std::max(worst, std::abs(fd_k - an_k[c]));
    }
    return worst;
}

}  // namespace mfg
