#include "cnvs/random.hpp"

#include <vector>

namespace cnvs {

Tensor normal_tensor(const Shape& shape, double stddev, Rng& rng, DType dtype) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) {
    x = dist(rng);
  }
  return Tensor::from(shape, v, dtype);
}

Tensor uniform_tensor(const Shape& shape, double lo, double hi, Rng& rng, DType dtype) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) {
    x = dist(rng);
  }
  return Tensor::from(shape, v, dtype);
}

Tensor param(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

}  // namespace cnvs
