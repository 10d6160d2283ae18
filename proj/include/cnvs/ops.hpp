#pragma once

#include <cstdint>
#include <vector>

#include "cnvs/tensor.hpp"

namespace cnvs {

// Binary arithmetic. `b` may match `a` exactly, be a trailing-suffix of a's shape
// (e.g. a bias row), or hold a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

// Elementwise nonlinearities.
Tensor elu(const Tensor& x, double alpha = 1.0);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sin(const Tensor& x);
Tensor cos(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor relu(const Tensor& x);
/// Clamp with zero gradient outside [lo, hi].
Tensor clamp(const Tensor& x, double lo, double hi);

// Matrix ops on rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
/// Row-wise normalization over the last axis followed by the affine pair.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Normalization without affine parameters.
Tensor layer_norm(const Tensor& x, double eps = 1e-5);

// Shape manipulation.
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t begin, std::int64_t end);
/// Repeats a trailing axis of extent 1 `n` times: [..., 1] -> [..., n].
Tensor expand_last(const Tensor& x, std::int64_t n);

// Reductions to a rank-0 scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean absolute difference.
Tensor l1(const Tensor& a, const Tensor& b);
/// Mean squared difference.
Tensor mse(const Tensor& a, const Tensor& b);
/// Mean over rows of a rank-2 tensor: [m x n] -> [n].
Tensor mean_rows(const Tensor& x);

// Spatial ops on channels-last maps [H x W x C].
/// Zero-padded stride-1 convolution. weight: [k x k x Cin x Cout], k in {1, 3}; bias: [Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Non-overlapping box average with the given factor; H and W must be divisible.
Tensor avg_pool2d(const Tensor& x, std::int64_t factor);
/// Sobel x/y responses over the valid interior: [H x W x C] -> [(H-2) x (W-2) x C x 2].
Tensor sobel(const Tensor& x);

/// [H x W x C] -> [(H/p)(W/p) x p*p*C]; within a patch: row-major pixels, channels last.
Tensor patchify(const Tensor& image, std::int64_t patch);
/// Inverse of patchify for a grid of `rows` x `cols` patches.
Tensor unpatchify(const Tensor& patches, std::int64_t rows, std::int64_t cols, std::int64_t patch);

}  // namespace cnvs
