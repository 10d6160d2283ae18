#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "cnvs/tensor.hpp"

namespace cnvs {

/// Learning-rate schedule. Cosine decays from `base_rate` at step 0 to `min_rate` at `total_steps`
/// and stays there afterwards.
struct LrSchedule {
  enum class Kind { cosine, constant };
  Kind kind = Kind::constant;
  double base_rate = 1e-3;
  double min_rate = 0.0;
  std::int64_t total_steps = 1;

  static LrSchedule constant(double rate) { return {Kind::constant, rate, rate, 1}; }
  static LrSchedule cosine(double base, double minimum, std::int64_t steps) {
    return {Kind::cosine, base, minimum, steps};
  }
  double rate_at(std::int64_t step) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

struct ParamGroup {
  std::vector<Tensor> params;
  LrSchedule schedule;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
class AdamW {
 public:
  AdamW(std::vector<ParamGroup> groups, AdamWConfig config);

  /// One update using every parameter's accumulated gradient, then clears the gradients.
  /// Throws ContractError when a parameter has no gradient.
  void step();
  std::int64_t step_count() const { return step_; }
  /// Rate the next `step()` would use for group `g`.
  double current_rate(std::size_t g = 0) const;
  const std::vector<ParamGroup>& groups() const { return groups_; }
  /// First/second moment buffers, in parameter order across groups.
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<ParamGroup> groups_;
  AdamWConfig config_;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

/// Compares reverse-mode gradients of the scalar `f` against central differences.
///
/// Returns max over all parameter entries of |analytic - numeric| / max(1, |analytic|).
/// Parameters must be 64-bit leaves with requires_grad set; `f` must return one element.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps = 1e-6);

}  // namespace cnvs
