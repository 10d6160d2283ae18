#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cnvs/geometry.hpp"
#include "cnvs/tensor.hpp"

namespace cnvs {

struct LossWeights {
  double nvs = 1.0;
  double gs = 1.0;
  double pts = 100.0;
  double smplx = 1.0;
  double lpips = 1.0;    // weight of the gradient-structure surrogate inside the image losses
  double distill = 1.0;
  double conf = 0.2;     // negative-log-confidence regularizer in the point loss
  double abs = 1.0;      // absolute point term
  int pts_scales = 4;    // decimation levels k = 0 .. pts_scales-1

  /// Throws ConfigError on negative weights or a scale count outside [1, 8].
  void validate() const;
};

/// Mean L1 between Sobel responses of the two images at scales 1, 1/2 and 1/4, averaged over
/// the scales the image size admits (divisible, at least 3 px per side after pooling).
Tensor gradient_surrogate(const Tensor& a, const Tensor& b);

/// MSE plus lpips-weighted gradient surrogate. Images [H x W x 3].
Tensor loss_nvs(const Tensor& pred, const Tensor& target, const LossWeights& weights = {});
/// Same objective applied to the splat render.
Tensor loss_gs(const Tensor& pred, const Tensor& target, const LossWeights& weights = {});

/// Confidence-weighted multi-scale point-map loss. `mask` is [H x W x 1] with 1 at valid
/// ground-truth pixels. Each L1 term is a mean over the valid entries it covers:
///   sum_k 2^-k |C (grad_k X - grad_k X_gt)| + abs |C (X - X_gt)| - conf mean(log C).
/// grad_k are forward differences in x and y on 2^k-pooled maps; a pooled pixel is valid when
/// every pixel under it is, and a difference when both of its ends are. C is taken at the
/// first end of each difference.
Tensor loss_pts(const PointMapPrediction& pred, const Tensor& gt_points, const Tensor& mask,
                const LossWeights& weights = {});

/// Summed squared error over the four parameter groups.
Tensor loss_smplx(const BodyParams& student, const BodyParams& teacher);

/// Mean over layers of the per-layer MSE between hidden states.
Tensor loss_distill(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher);

/// Unweighted terms; undefined tensors count as absent (zero).
struct LossTerms {
  Tensor nvs;
  Tensor gs;
  Tensor pts;
  Tensor smplx;
  Tensor distill;
};

struct LossReport {
  std::int64_t step = 0;
  double nvs = 0.0;
  double gs = 0.0;
  double pts = 0.0;
  double smplx = 0.0;
  double distill = 0.0;
  double total = 0.0;

  static std::string csv_header();  // step,nvs,gs,pts,smplx,distill,total
  std::string csv_row() const;
};

struct WeightedLoss {
  Tensor total;  // differentiable
  LossReport report;
};

/// Weighted sum of the present terms. Throws NumericError naming the first non-finite term.
WeightedLoss loss_total(const LossTerms& terms, const LossWeights& weights, std::int64_t step = 0);

}  // namespace cnvs
