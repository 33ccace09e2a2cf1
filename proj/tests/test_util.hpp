#pragma once

#include <Eigen/Dense>
#include <random>

#include "mfg/measure.hpp"

namespace mfg::test {

// Uniform-weight cloud with entries ~ U[-scale, scale].
inline EmpiricalMeasure random_cloud(std::mt19937_64& rng, int n, int d, double scale) {
    std::uniform_real_distribution<double> u(-scale, scale);
    Eigen::MatrixXd pts(n, d);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) pts(i, c) = u(rng);
    return EmpiricalMeasure::uniform(std::move(pts));
}

inline Eigen::VectorXd random_vec(std::mt19937_64& rng, int d, double scale) {
    std::uniform_real_distribution<double> u(-scale, scale);
    Eigen::VectorXd v(d);
    for (int c = 0; c < d; ++c) v[c] = u(rng);
    return v;
}

}  // namespace mfg::test
