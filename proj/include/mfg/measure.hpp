#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace mfg {

// Weighted particle cloud on R^d, plus optional zero-weight probe particles.
// Probes ride along under push-forward like ordinary points but never enter
// integrals, moments, or transport distances. Instances are immutable.
class EmpiricalMeasure {
public:
    EmpiricalMeasure() = default;

    // points: N x d row-major particle positions; weights: length N, >= 0,
    // summing to 1 within 1e-12; probes: M x d (may have zero rows).
    EmpiricalMeasure(Eigen::MatrixXd points, Eigen::VectorXd weights,
                     Eigen::MatrixXd probes = Eigen::MatrixXd());

    static EmpiricalMeasure uniform(Eigen::MatrixXd points);
    static EmpiricalMeasure dirac(const Eigen::VectorXd& x);
    static EmpiricalMeasure dirac1(double x);
    // 1-d cloud of n iid N(mean, stddev^2) draws, equal weights. Sampling is
    // fully deterministic in (seed): mt19937_64 + explicit Box-Muller.
    static EmpiricalMeasure gaussian(double mean, double stddev, int n, std::uint64_t seed);

    int dim() const { return points_.rows() > 0 ? int(points_.cols()) : int(probes_.cols()); }
    int n_points() const { return int(points_.rows()); }
    int n_probes() const { return int(probes_.rows()); }
    int n_rows() const { return n_points() + n_probes(); }  // points then probes

    const Eigen::MatrixXd& points() const { return points_; }
    const Eigen::VectorXd& weights() const { return weights_; }
    const Eigen::MatrixXd& probes() const { return probes_; }

    Eigen::VectorXd point(int i) const { return points_.row(i).transpose(); }
    Eigen::VectorXd probe(int i) const { return probes_.row(i).transpose(); }
    // Unified row access: rows [0, N) are points, [N, N+M) are probes.
    Eigen::VectorXd row(int i) const;
    bool row_is_probe(int i) const { return i >= n_points(); }
    double row_weight(int i) const { return row_is_probe(i) ? 0.0 : weights_[i]; }

    EmpiricalMeasure with_probes(Eigen::MatrixXd probes) const;
    EmpiricalMeasure without_probes() const;

    // (sum_i w_i |x_i|^p)^(1/p) over points only; requires p >= 1.
    double moment(double p) const;
    double norm1() const { return moment(1.0); }

    // Weighted integral over points of a scalar statistic.
    double integrate(const std::function<double(const Eigen::VectorXd&)>& fn) const;
    Eigen::VectorXd mean() const;

    // Memoized scalar functionals. Keys are caller-chosen small ids; values
    // are computed once per measure instance (instances are immutable).
    double cached_functional(int id, const std::function<double(const Eigen::VectorXd&)>& fn) const;

private:
    Eigen::MatrixXd points_;   // N x d
    Eigen::VectorXd weights_;  // N
    Eigen::MatrixXd probes_;   // M x d
    mutable std::vector<std::pair<int, double>> functional_cache_;
};

// Applies fn to every point and probe; weights are unchanged.
EmpiricalMeasure push_forward(const EmpiricalMeasure& mu,
                              const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& fn);

// Exact Wasserstein-p distance, p in {1, 2}. d == 1 uses the quantile
// coupling (arbitrary weights, ties broken by particle index). d > 1 requires
// equal point counts with uniform weights and N <= assignment_cap, solved as
// an exact assignment problem; otherwise throws UnsupportedTransport.
double wasserstein(const EmpiricalMeasure& a, const EmpiricalMeasure& b, int p,
                   int assignment_cap = 512);

// CSV serialization: header "kind,w,x_1,...,x_d", one row per point then per
// probe, 17 significant digits.
std::string to_csv(const EmpiricalMeasure& mu);
EmpiricalMeasure measure_from_csv(const std::string& csv);

}  // namespace mfg
