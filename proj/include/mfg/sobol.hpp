#pragma once

#include <Eigen/Dense>
#include <cstdint>

namespace mfg {

// Low-discrepancy sequence in [0,1)^dim, dim <= 8 (Joe-Kuo direction
// numbers). Deterministic: the n-th point depends only on (dim, n). The
// all-zeros initial point is skipped.
class SobolSequence {
public:
    explicit SobolSequence(int dim);

    Eigen::VectorXd next();

    // Next point scaled to the box [lo, hi] componentwise.
    Eigen::VectorXd next_in(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi);

    int dim() const { return dim_; }
    std::uint64_t index() const { return index_; }

private:
    int dim_;
    std::uint64_t index_ = 0;
    std::uint32_t state_[8] = {0};
    std::uint32_t directions_[8][33];
};

}  // namespace mfg
