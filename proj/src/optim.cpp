#include "cnvs/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cnvs {

double LrSchedule::rate_at(std::int64_t step) const {
  if (kind == Kind::constant) {
    return base_rate;
  }
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(std::max<std::int64_t>(total_steps, 1)), 0.0, 1.0);
  return min_rate + 0.5 * (base_rate - min_rate) * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(std::vector<ParamGroup> groups, AdamWConfig config) : groups_(std::move(groups)), config_(config) {
  for (const auto& g : groups_) {
    for (const auto& p : g.params) {
      m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
      v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }
  }
}

double AdamW::current_rate(std::size_t g) const { return groups_.at(g).schedule.rate_at(step_); }

void AdamW::step() {
  for (const auto& g : groups_) {
    for (const auto& p : g.params) {
      if (!p.has_grad()) {
        throw ContractError("AdamW::step: parameter of shape " + shape_str(p.shape()) + " has no gradient");
      }
    }
  }
  const auto t = static_cast<double>(step_ + 1);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  std::size_t slot = 0;
  for (auto& g : groups_) {
    const double lr = g.schedule.rate_at(step_);
    for (auto& p : g.params) {
      auto& m = m_[slot];
      auto& v = v_[slot];
      ++slot;
      dispatch(p.dtype(), [&]<class T>() {
        auto w = p.mutable_data<T>();
        auto gr = p.grad_data<T>();
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double gi = static_cast<double>(gr[i]);
          m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
          v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
          double wi = static_cast<double>(w[i]);
          wi *= 1.0 - lr * config_.weight_decay;
          wi -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
          w[i] = static_cast<T>(wi);
        }
      });
      p.zero_grad();
    }
  }
  ++step_;
}

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps) {
  for (const auto& p : params) {
    if (p.dtype() != DType::f64) {
      throw ContractError("grad_check requires 64-bit parameters");
    }
    if (!p.requires_grad()) {
      throw ContractError("grad_check: parameter does not require grad");
    }
  }
  for (auto p : params) {
    p.zero_grad();
  }
  Tensor out = f();
  if (out.numel() != 1) {
    throw ContractError("grad_check: objective is not scalar, shape " + shape_str(out.shape()));
  }
  if (out.requires_grad()) {
    out.backward();
  }
  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto p : params) {
    std::vector<double> analytic(static_cast<std::size_t>(p.numel()), 0.0);
    if (p.has_grad()) {
      auto g = p.grad_data<double>();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    auto w = p.mutable_data<double>();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + eps;
      const double up = f().item();
      w[i] = orig - eps;
      const double down = f().item();
      w[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
    p.zero_grad();
  }
  return worst;
}

}  // namespace cnvs
