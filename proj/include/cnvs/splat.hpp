#pragma once

#include "cnvs/camera.hpp"
#include "cnvs/tensor.hpp"

namespace cnvs {

/// Isotropic Gaussians in world space.
struct GaussianSet {
  Tensor means;    // [G x 3], meters
  Tensor scales;   // [G], standard deviation in meters
  Tensor opacity;  // [G], in (0, 1)
  Tensor colors;   // [G x 3], in (0, 1)

  std::int64_t size() const { return means.defined() ? means.dim(0) : 0; }
};

struct SplatImage {
  Tensor image;  // [H x W x 3]
  Tensor alpha;  // [H x W x 1]
};

inline constexpr int kSplatMaxContributors = 32;
inline constexpr double kSplatCutoffSigmas = 3.0;
inline constexpr double kSplatNearPlane = 0.05;

/// Front-to-back compositing of screen-space isotropic footprints.
///
/// Each Gaussian projects to a disc with sigma_px = mean(fx, fy) * scale / depth and support
/// 3 sigma_px. A pixel composites its contributors in ascending depth (ties by index), keeping
/// the nearest 32: C = sum_i c_i w_i prod_{j<i} (1 - w_j), w_i = a_i exp(-r^2 / (2 sigma_px^2)).
/// Differentiable with respect to every field except the discrete ordering and support.
SplatImage splat_render(const GaussianSet& gaussians, const CameraPose& pose);

}  // namespace cnvs
