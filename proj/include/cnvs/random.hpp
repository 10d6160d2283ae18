#pragma once

#include <cstdint>
#include <random>

#include "cnvs/tensor.hpp"

namespace cnvs {

using Rng = std::mt19937_64;

/// Gaussian-initialized tensor (mean 0, standard deviation `stddev`).
Tensor normal_tensor(const Shape& shape, double stddev, Rng& rng, DType dtype);
/// Uniform values in [lo, hi).
Tensor uniform_tensor(const Shape& shape, double lo, double hi, Rng& rng, DType dtype);
/// Learnable leaf: the tensor with requires_grad set.
Tensor param(Tensor t);

}  // namespace cnvs
