#include <doctest.h>

#include "mfg/master.hpp"

#include "mfg/cascade.hpp"
#include "mfg/errors.hpp"
#include "mfg/model.hpp"
#include "mfg/solver.hpp"

using namespace mfg;

namespace {

struct LqSetup {
    CoefficientModel model = lq_model();
    ConstantCascade cascade = compute_cascade(lq_model());
};

struct NonLqSetup {
    CoefficientModel model = nonlq_model();
    ConstantCascade cascade = compute_cascade(nonlq_model());
};

}  // namespace

TEST_CASE("value at the terminal node is the terminal cost exactly") {
    LqSetup lq;
    EmpiricalMeasure m0 = EmpiricalMeasure::dirac1(0.7);
    FlowSolution sol = solve_global(lq.model, lq.cascade, m0, 0.0, 0.5, 1e-2);
    const int n = sol.grid.n_steps;
    std::string tag;
    double v = value_from(lq.model, sol, 0, n, &tag);
    CHECK(v == lq.model.k(sol.X[n].row(0).transpose(), sol.measure_at(n)));
}
