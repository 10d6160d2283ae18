#pragma once

#include <cmath>
#include <vector>

#include "cnvs/random.hpp"
#include "cnvs/tensor.hpp"

namespace testing {

inline double max_abs_diff(const cnvs::Tensor& a, const cnvs::Tensor& b) {
  const auto x = a.to_vector(), y = b.to_vector();
  double m = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    m = std::max(m, std::abs(x[i] - y[i]));
  }
  return m;
}

inline bool bitwise_equal(const cnvs::Tensor& a, const cnvs::Tensor& b) {
  return a.shape() == b.shape() && a.dtype() == b.dtype() && a.to_vector() == b.to_vector();
}

inline cnvs::Tensor rand64(const cnvs::Shape& shape, cnvs::Rng& rng, double scale = 1.0) {
  return cnvs::param(cnvs::normal_tensor(shape, scale, rng, cnvs::DType::f64));
}

}  // namespace testing
