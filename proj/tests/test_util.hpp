#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dtdy/rng.hpp"
#include "dtdy/tensor.hpp"

namespace testutil {

inline dtdy::Tensor randn(dtdy::Shape shape, std::uint64_t seed, bool requires_grad = false, double stddev = 1.0) {
    dtdy::Rng rng(seed);
    return dtdy::rand_gaussian(std::move(shape), rng, stddev, requires_grad);
}

inline double max_abs_diff(const dtdy::Tensor& a, const dtdy::Tensor& b) {
    if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

inline bool bit_identical(const dtdy::Tensor& a, const dtdy::Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.data().size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

}  // namespace testutil
