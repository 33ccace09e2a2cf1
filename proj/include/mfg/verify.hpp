#pragma once

#include <string>
#include <vector>

#include "mfg/cascade.hpp"
#include "mfg/model.hpp"
#include "mfg/solver.hpp"

namespace mfg {

// Outcome of one audited condition. Closed-form checks can genuinely pass;
// sup/inf conditions checked by sampling can at best be "sampled-pass": the
// sampler looked for a counterexample and found none.
enum class CheckStatus { pass, sampled_pass, fail };

const char* to_string(CheckStatus s);

struct CheckRecord {
    std::string name;
    CheckStatus status = CheckStatus::fail;
    // Signed margin of the worst sample: distance to violation, negative on a
    // fail. Exact-identity checks store the largest deviation (negated).
    double worst = 0.0;
    Vec witness;       // flattened sample attaining `worst`; empty if closed-form
    long long samples = 0;
    std::string note;  // short human-readable context
};

struct AuditReport {
    std::vector<CheckRecord> checks;

    bool all_pass() const;  // no record has status fail
    const CheckRecord* find(const std::string& name) const;  // nullptr if absent
};

struct AuditOptions {
    long long sample_budget = 1000;
    // Sampling boxes: cloud points and probe states in [-box_x, box_x]^d,
    // controls in [-box_alpha, box_alpha]^{d_alpha}. Cloud points are also
    // capped so ||mu||_1 stays below box_mu.
    double box_x = 5.0;
    double box_mu = 5.0;
    double box_alpha = 5.0;
    int cloud_points = 4;   // particles per sampled cloud
    double slack = 1e-9;    // absolute tolerance on inequalities and identities
};

// Audits the standing assumptions on the coefficient functions (drift
// ellipticity and derivative bounds, cost convexity and measure monotonicity,
// terminal-cost analogues), the origin normalization, the cone-restricted
// displacement form of the Hamiltonian, and the smallness conditions tying
// the cross-derivative bounds to the derived constants. Closed-form where the
// condition is finite arithmetic on declared constants, quasi-random sampling
// where it quantifies over states, measures, or controls. Failures become
// report entries; nothing throws for a violated condition.
AuditReport audit_assumptions(const CoefficientModel& model, const AuditOptions& opts = {});

// Difference-quotient lower bound for the Lipschitz seminorm of the
// decoupling field at time t, compared against the a priori bound Lstar0.
struct GammaReport {
    double x_quotient = 0.0;  // max |gamma(t,xp,m)-gamma(t,xq,m)| / |xp-xq|
    double m_quotient = 0.0;  // max Lions-scaled particle-nudge quotient
    double estimate = 0.0;    // max of the two
    double bound = 0.0;       // Lstar0 * (1 + 1e-3)
    bool pass = false;        // estimate <= bound
    int probes = 0;
    int nudges = 0;
};

// Solves once with n_probes quasi-random probes riding on m and measures the
// field's x-quotients across probe pairs; then nudges a few particles and
// measures the weight-rescaled measure quotients at the probes. Every
// quotient is a lower bound for the seminorm, so `pass` is a one-sided check
// of the a priori estimate, not a certificate.
GammaReport measure_gamma_lipschitz(const CoefficientModel& model,
                                    const ConstantCascade& cascade, double t,
                                    const EmpiricalMeasure& m, double T, int n_probes,
                                    double dt = 1e-3, const SolverOptions& solver_opts = {});

}  // namespace mfg
