#include "mfg/control.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

#include "mfg/errors.hpp"
#include "mfg/sobol.hpp"

namespace mfg {

ConeReport cone_check(const ConstantCascade& cascade, const Vec& x,
                      const EmpiricalMeasure& mu, const Vec& z) {
    const double radius = cascade.cone_radius(x.norm(), mu.norm1());
    const double margin = radius - z.norm();
    return {margin >= 0.0, margin};
}

namespace {

double min_eigenvalue(const Mat& h) {
    if (h.rows() == 1) return h(0, 0);
    Eigen::SelfAdjointEigenSolver<Mat> es(h, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

}  // namespace

ControlSolve solve_control(const CoefficientModel& model, const ConstantCascade& cascade,
                           const Vec& x, const EmpiricalMeasure& mu, const Vec& z,
                           const Vec* warm_start, const ControlOptions& opts) {
    const bool inside = cone_check(cascade, x, mu, z).inside;
    Vec a = warm_start ? *warm_start : Vec::Zero(model.d_alpha);
    auto residual_at = [&](const Vec& alpha) {
        return Vec(model.da_f(x, mu, alpha) * z + model.da_g(x, mu, alpha));
    };
    Vec r = residual_at(a);
    double rn = r.norm();
    int iter = 0;
    auto diverged = [&](const char* why) {
        return NewtonDiverged(std::string("solve_control: ") + why,
                              a.size() == 1 ? a[0] : a.norm(), rn, inside);
    };
    while (rn > opts.newton_tol) {
        if (iter >= opts.newton_max) throw diverged("iteration budget exhausted");
        const Mat h = model.dada_f_dot(x, mu, a, z) + model.dada_g(x, mu, a);
        Vec step(model.d_alpha);
        if (model.d_alpha == 1) {
            if (!(h(0, 0) > 0.0))
                throw SingularHessian("solve_control: nonpositive Hessian");
            step[0] = r[0] / h(0, 0);
        } else {
            if (!(min_eigenvalue(h) > 0.0))
                throw SingularHessian("solve_control: Hessian not positive definite");
            step = h.ldlt().solve(r);
        }
        // Full Newton step; bisect only if the residual rises.
        double scale = 1.0;
        bool improved = false;
        for (int halvings = 0; halvings < 40; ++halvings) {
            const Vec cand = a - scale * step;
            const Vec rc = residual_at(cand);
            const double rcn = rc.norm();
            if (rcn < rn || rcn <= opts.newton_tol) {
                a = cand;
                r = rc;
                rn = rcn;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        ++iter;
        if (!improved) throw diverged("no descent direction");
    }
    ControlSolve out;
    out.alpha_hat = a;
    out.residual = rn;
    out.iterations = iter;
    out.hessian_min_eig = min_eigenvalue(model.dada_f_dot(x, mu, a, z) + model.dada_g(x, mu, a));
    out.in_cone = inside;
    if (!(out.hessian_min_eig > 0.0))
        throw SingularHessian("solve_control: nonpositive Hessian at the solution");
    return out;
}

ControlDerivatives control_derivatives(const CoefficientModel& model,
                                       const ConstantCascade& cascade, const Vec& x,
                                       const EmpiricalMeasure& mu, const Vec& z,
                                       const Vec* warm_start, const ControlOptions& opts) {
    const ControlSolve sol = solve_control(model, cascade, x, mu, z, warm_start, opts);
    ControlDerivatives cd;
    cd.alpha_hat = sol.alpha_hat;
    cd.hessian = model.dada_f_dot(x, mu, cd.alpha_hat, z) + model.dada_g(x, mu, cd.alpha_hat);
    cd.hessian_ldlt.compute(cd.hessian);
    if (cd.hessian_ldlt.info() != Eigen::Success || !cd.hessian_ldlt.isPositive())
        throw SingularHessian("control_derivatives: Hessian factorization failed");
    const Mat da_f = model.da_f(x, mu, cd.alpha_hat);
    cd.dz_alpha = -cd.hessian_ldlt.solve(da_f).transpose();
    const Mat mx = model.dxda_f_dot(x, mu, cd.alpha_hat, z) + model.dxda_g(x, mu, cd.alpha_hat);
    cd.dx_alpha = -cd.hessian_ldlt.solve(mx.transpose()).transpose();
    return cd;
}

Mat dmu_alpha(const CoefficientModel& model, const ControlDerivatives& cd, const Vec& x,
              const EmpiricalMeasure& mu, const Vec& z, const Vec& xt) {
    const Mat mmu = model.dmuda_f_dot(x, mu, cd.alpha_hat, xt, z) +
                    model.dmuda_g(x, mu, cd.alpha_hat, xt);
    return -cd.hessian_ldlt.solve(mmu.transpose()).transpose();
}

CoercivityReport coercivity_check(const CoefficientModel& model,
                                  const ConstantCascade& cascade, int sample_budget) {
    const int d = model.d_x;
    const int dims = 5 * d + 1;  // x, three cloud points, z direction, z scale
    if (dims > 8)
        throw ConfigError("coercivity_check: sampling supports d_x = 1 models only");
    SobolSequence seq(dims);
    Vec lo = Vec::Constant(dims, -5.0), hi = Vec::Constant(dims, 5.0);
    lo[dims - 1] = 0.0;
    hi[dims - 1] = 1.0;

    CoercivityReport report;
    const ModelConstants& c = model.constants;
    report.bound = -c.lambda_f * c.lambda_f / (c.Lambda_g + c.lambda_g / 20.0);
    report.worst = -std::numeric_limits<double>::infinity();
    report.samples = sample_budget;

    Vec warm = Vec::Zero(model.d_alpha);
    for (int s = 0; s < sample_budget; ++s) {
        const Vec q = seq.next_in(lo, hi);
        const Vec x = q.segment(0, d);
        Eigen::MatrixXd pts(3, d);
        for (int i = 0; i < 3; ++i) pts.row(i) = q.segment(d + i * d, d).transpose();
        const EmpiricalMeasure mu = EmpiricalMeasure::uniform(std::move(pts));
        Vec dir = q.segment(4 * d, d);
        if (dir.norm() < 1e-12) dir = Vec::Ones(d);
        const double radius = cascade.cone_radius(x.norm(), mu.norm1());
        const Vec z = dir / dir.norm() * (radius * q[dims - 1]);

        const ControlDerivatives cd = control_derivatives(model, cascade, x, mu, z, &warm);
        warm = cd.alpha_hat;
        const Mat curv = cd.dz_alpha * model.da_f(x, mu, cd.alpha_hat);
        const Mat sym = 0.5 * (curv + curv.transpose());
        double top;
        if (d == 1) {
            top = sym(0, 0);
        } else {
            Eigen::SelfAdjointEigenSolver<Mat> es(sym, Eigen::EigenvaluesOnly);
            top = es.eigenvalues().maxCoeff();
        }
        if (top > report.worst) {
            report.worst = top;
            report.witness_x = x;
            report.witness_z = z;
        }
    }
    report.pass = report.worst <= report.bound + 1e-12;
    return report;
}

}  // namespace mfg
