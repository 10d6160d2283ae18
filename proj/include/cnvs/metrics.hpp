#pragma once

#include <string>
#include <vector>

#include "cnvs/tensor.hpp"

namespace cnvs {

/// Reported in place of +inf when the images are identical.
inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) for images in [0, 1]. Throws DimensionError on a shape mismatch.
double psnr(const Tensor& a, const Tensor& b);

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2,
/// valid-region mean per channel, then averaged over channels. Images [H x W x C].
/// Throws ContractError when a side is shorter than the window.
double ssim(const Tensor& a, const Tensor& b);

struct ViewMetric {
  int identity = 0;
  int view = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::vector<ViewMetric> views;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;

  void add(const ViewMetric& m);
  /// Recomputes the means from the per-view values.
  void finalize();
  int count() const { return static_cast<int>(views.size()); }
  /// `identity,view,psnr_db,ssim` rows followed by a `mean,<count>,...` row.
  std::string csv() const;
};

}  // namespace cnvs
