#include "mfg/sobol.hpp"

#include <bit>

#include "mfg/errors.hpp"

namespace mfg {

namespace {

struct Primitive {
    int s;
    std::uint32_t a;
    std::uint32_t m[5];
};

// Joe-Kuo parameters for dimensions 2..8 (dimension 1 is van der Corput).
constexpr Primitive kPrimitives[7] = {
    {1, 0, {1, 0, 0, 0, 0}},  {2, 1, {1, 3, 0, 0, 0}},     {3, 1, {1, 3, 1, 0, 0}},
    {3, 2, {1, 1, 1, 0, 0}},  {4, 1, {1, 1, 3, 3, 0}},     {4, 4, {1, 3, 5, 13, 0}},
    {5, 2, {1, 1, 5, 5, 17}},
};

constexpr int kBits = 32;

}  // namespace

SobolSequence::SobolSequence(int dim) : dim_(dim) {
    if (dim < 1 || dim > 8)
        throw ConfigError("SobolSequence: dim must be in [1, 8], got " + std::to_string(dim));
    for (int k = 1; k <= kBits; ++k) directions_[0][k] = 1u << (kBits - k);
    for (int j = 1; j < dim_; ++j) {
        const Primitive& prim = kPrimitives[j - 1];
        const int s = prim.s;
        for (int k = 1; k <= s; ++k) directions_[j][k] = prim.m[k - 1] << (kBits - k);
        for (int k = s + 1; k <= kBits; ++k) {
            std::uint32_t v = directions_[j][k - s] ^ (directions_[j][k - s] >> s);
            for (int i = 1; i < s; ++i)
                if ((prim.a >> (s - 1 - i)) & 1u) v ^= directions_[j][k - i];
            directions_[j][k] = v;
        }
    }
}

Eigen::VectorXd SobolSequence::next() {
    // Gray-code update: flip the direction picked by the lowest zero bit of
    // the running index.
    const int c = std::countr_one(index_) + 1;
    ++index_;
    Eigen::VectorXd out(dim_);
    for (int j = 0; j < dim_; ++j) {
        state_[j] ^= directions_[j][c];
        out[j] = double(state_[j]) * 0x1p-32;
    }
    return out;
}

Eigen::VectorXd SobolSequence::next_in(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
    if (lo.size() != dim_ || hi.size() != dim_)
        throw ConfigError("SobolSequence::next_in: box dimension mismatch");
    Eigen::VectorXd u = next();
    return lo.array() + (hi - lo).array() * u.array();
}

}  // namespace mfg
