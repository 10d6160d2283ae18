#include <cmath>
#include <numbers>

#include "cnvs/checkpoint.hpp"
#include "cnvs/ops.hpp"
#include "cnvs/optim.hpp"
#include "doctest.h"
#include "grad_suite.hpp"
#include "helpers.hpp"

using namespace cnvs;
using testing::bitwise_equal;
using testing::max_abs_diff;
using testing::rand64;

TEST_CASE("matmul") {
  Rng rng(1);
  const Tensor x = normal_tensor({2, 5}, 1.0, rng, DType::f32);
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1}, DType::f32);
  CHECK(bitwise_equal(matmul(eye, x), x));

  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from({2, 1}, {1, 1});
  const Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.at(0) == 3.0);
  CHECK(c.at(1) == 7.0);

  // d sum(AB)/dA_ik = sum_j B_kj, checked by hand and by finite differences.
  Tensor A = rand64({3, 4}, rng), B = rand64({4, 2}, rng);
  sum(matmul(A, B)).backward();
  const auto g = A.grad_data<double>();
  const auto bv = B.to_vector();
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      CHECK(g[static_cast<std::size_t>(i * 4 + k)] == doctest::Approx(bv[k * 2] + bv[k * 2 + 1]).epsilon(1e-12));
    }
  }
  A.zero_grad();
  B.zero_grad();
  CHECK(grad_check([&] { return sum(matmul(A, B)); }, {A, B}) < 1e-4);

  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 1})), DimensionError);
  try {
    matmul(a, Tensor::zeros({3, 1}));
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x2]") != std::string::npos);
    CHECK(msg.find("[3x1]") != std::string::npos);
  }
}

TEST_CASE("softmax rows") {
  const Tensor s = softmax_rows(Tensor::from({3, 2}, {0, 0, 0, std::log(3.0), -5, -5}, DType::f64));
  CHECK(s.at(0) == 0.5);
  CHECK(s.at(1) == 0.5);
  CHECK(s.at(2) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(s.at(3) == doctest::Approx(0.75).epsilon(1e-12));

  for (double c : {-1000.0, 0.0, 3.7, 1000.0}) {
    const Tensor t = softmax_rows(Tensor::full({1, 3}, c, DType::f64));
    for (int j = 0; j < 3; ++j) {
      CHECK(t.at(j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    }
  }
  Rng rng(2);
  const Tensor r = softmax_rows(normal_tensor({6, 7}, 10.0, rng, DType::f32));
  for (int i = 0; i < 6; ++i) {
    double total = 0;
    for (int j = 0; j < 7; ++j) {
      total += r.at(i * 7 + j);
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("elementwise values") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(add_scalar(elu(Tensor::scalar(0.0)), 1.0).item() == 1.0);
  CHECK(softplus(Tensor::scalar(0.0, DType::f64)).item() == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  CHECK(sigmoid(Tensor::scalar(-800.0, DType::f64)).item() >= 0.0);
  CHECK(std::isfinite(softplus(Tensor::scalar(800.0, DType::f64)).item()));
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);

  const Tensor ln = layer_norm(Tensor::full({2, 5}, 3.25, DType::f64));
  for (double v : ln.to_vector()) {
    CHECK(v == 0.0);
  }
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
  CHECK_THROWS_AS(reshape(Tensor::zeros({2, 3}), {4, 2}), DimensionError);
  CHECK_THROWS_AS(concat({Tensor::zeros({2, 3}), Tensor::zeros({2, 2})}, 0), DimensionError);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({4, 4, 1}), Tensor::zeros({5, 5, 1, 1}), Tensor::zeros({1})), ConfigError);
}

TEST_CASE("conv2d matches direct loop") {
  Rng rng(3);
  const Tensor x = normal_tensor({5, 4, 2}, 1.0, rng, DType::f64);
  const Tensor w = normal_tensor({3, 3, 2, 3}, 1.0, rng, DType::f64);
  const Tensor b = normal_tensor({3}, 1.0, rng, DType::f64);
  const Tensor y = conv2d(x, w, b);
  const auto xv = x.to_vector(), wv = w.to_vector(), bv = b.to_vector(), yv = y.to_vector();
  double worst = 0;
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 4; ++j) {
      for (int o = 0; o < 3; ++o) {
        double acc = bv[o];
        for (int di = 0; di < 3; ++di) {
          for (int dj = 0; dj < 3; ++dj) {
            const int yi = i + di - 1, xj = j + dj - 1;
            if (yi < 0 || yi >= 5 || xj < 0 || xj >= 4) {
              continue;
            }
            for (int c = 0; c < 2; ++c) {
              acc += xv[(yi * 4 + xj) * 2 + c] * wv[((di * 3 + dj) * 2 + c) * 3 + o];
            }
          }
        }
        worst = std::max(worst, std::abs(acc - yv[(i * 4 + j) * 3 + o]));
      }
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("every op passes the finite-difference check") {
  for (const auto& c : testing::grad_cases()) {
    CAPTURE(c.name);
    CHECK(c.run() < 1e-4);
  }
}

TEST_CASE("grad_check edge cases") {
  Rng rng(4);
  Tensor w = rand64({2, 3}, rng);
  Tensor x = Tensor::from({3, 1}, {0.5, -1.0, 2.0}, DType::f64);
  CHECK(grad_check([&] { return sum(sigmoid(matmul(w, x))); }, {w}) < 1e-5);

  Tensor c = rand64({2}, rng);
  CHECK(grad_check([&] { return add(sum(mul(c, Tensor::zeros({2}, DType::f64))), Tensor::scalar(4.0, DType::f64)); },
                   {c}) == 0.0);
  c.zero_grad();
  sum(mul(c, Tensor::zeros({2}, DType::f64))).backward();
  for (double g : c.grad().to_vector()) {
    CHECK(g == 0.0);
  }
  CHECK_THROWS_AS(grad_check([&] { return mul(c, c); }, {c}), ContractError);
  Tensor f32 = param(Tensor::zeros({2}, DType::f32));
  CHECK_THROWS_AS(grad_check([&] { return sum(f32); }, {f32}), ContractError);
}

TEST_CASE("shared subexpressions accumulate gradients") {
  Rng rng(5);
  Tensor x = rand64({3, 3}, rng);
  // y = s + s with s = tanh(x) shared; the oracle duplicates the subgraph instead.
  const Tensor s = cnvs::tanh(x);
  sum(mul(add(s, s), s)).backward();
  const auto shared = x.grad().to_vector();
  x.zero_grad();
  sum(mul(add(cnvs::tanh(x), cnvs::tanh(x)), cnvs::tanh(x))).backward();
  const auto duplicated = x.grad().to_vector();
  for (std::size_t i = 0; i < shared.size(); ++i) {
    CHECK(shared[i] == doctest::Approx(duplicated[i]).epsilon(1e-14));
  }
}

TEST_CASE("forward passes are bitwise deterministic") {
  Rng rng(6);
  const Tensor a = normal_tensor({37, 53}, 1.0, rng, DType::f32);
  const Tensor b = normal_tensor({53, 29}, 1.0, rng, DType::f32);
  CHECK(bitwise_equal(matmul(a, b), matmul(a, b)));
  CHECK(bitwise_equal(softmax_rows(a), softmax_rows(a)));
  CHECK(sum(a).item() == sum(a).item());
}

TEST_CASE("backward frees the graph but keeps leaf gradients") {
  Tensor x = param(Tensor::from({2}, {1, 2}, DType::f64));
  Tensor y = sum(square(x));
  y.backward();
  CHECK(x.grad().to_vector() == std::vector<double>{2, 4});
  CHECK_THROWS_AS(sum(x).set_requires_grad(true), ContractError);
  {
    NoGradGuard guard;
    CHECK_FALSE(sum(square(x)).requires_grad());
  }
  CHECK(sum(square(x)).requires_grad());
}

TEST_CASE("AdamW") {
  SUBCASE("zero gradient and zero decay leave parameters unchanged") {
    Tensor w = param(Tensor::from({3}, {1, -2, 3}, DType::f64));
    AdamW opt({{{w}, LrSchedule::constant(0.1)}}, {0.9, 0.999, 1e-8, 0.0});
    sum(mul(w, Tensor::zeros({3}, DType::f64))).backward();
    opt.step();
    CHECK(w.to_vector() == std::vector<double>{1, -2, 3});
    CHECK(opt.step_count() == 1);
  }
  SUBCASE("one step on w^2 moves toward zero") {
    Tensor w = param(Tensor::from({1}, {1.0}, DType::f64));
    AdamW opt({{{w}, LrSchedule::constant(0.01)}}, AdamWConfig{});
    sum(square(w)).backward();
    opt.step();
    CHECK(std::abs(w.at(0)) < 1.0);
    // Bias-corrected first step moves by exactly the rate (up to eps) plus decay.
    CHECK(w.at(0) == doctest::Approx(1.0 * (1 - 0.01 * 1e-5) - 0.01).epsilon(1e-7));
  }
  SUBCASE("quadratic converges") {
    Tensor w = param(Tensor::from({2}, {1.5, -0.8}, DType::f64));
    const Tensor scales = Tensor::from({2}, {1.0, 4.0}, DType::f64);
    AdamW opt({{{w}, LrSchedule::cosine(0.1, 0.0, 200)}}, AdamWConfig{});
    double loss = 0;
    for (int i = 0; i < 200; ++i) {
      Tensor l = sum(mul(scales, square(w)));
      loss = l.item();
      l.backward();
      opt.step();
    }
    loss = sum(mul(scales, square(w))).item();
    CHECK(loss < 1e-6);
    CHECK(opt.step_count() == 200);
  }
  SUBCASE("missing gradient is a contract error") {
    Tensor w = param(Tensor::from({1}, {1.0}, DType::f64));
    AdamW opt({{{w}, LrSchedule::constant(0.01)}}, AdamWConfig{});
    CHECK_THROWS_AS(opt.step(), ContractError);
  }
  SUBCASE("moment shapes follow parameters") {
    Tensor a = param(Tensor::zeros({2, 3}, DType::f32)), b = param(Tensor::zeros({4}, DType::f32));
    AdamW opt({{{a}, LrSchedule::constant(0.1)}, {{b}, LrSchedule::constant(0.2)}}, AdamWConfig{});
    CHECK(opt.first_moments().size() == 2);
    CHECK(opt.first_moments()[0].size() == 6);
    CHECK(opt.second_moments()[1].size() == 4);
    CHECK(opt.current_rate(1) == 0.2);
  }
}

TEST_CASE("cosine schedule") {
  const auto s = LrSchedule::cosine(1e-3, 1e-6, 100);
  CHECK(s.rate_at(0) == 1e-3);
  CHECK(s.rate_at(100) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(s.rate_at(1000) == doctest::Approx(1e-6).epsilon(1e-12));
  for (int i = 1; i <= 100; ++i) {
    CHECK(s.rate_at(i) <= s.rate_at(i - 1));
  }
  CHECK(LrSchedule::constant(0.5).rate_at(12345) == 0.5);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(7);
  NamedTensors in{{"a.weight", normal_tensor({3, 4}, 1.0, rng, DType::f32)},
                  {"b", normal_tensor({5}, 1.0, rng, DType::f64)},
                  {"scalar", Tensor::scalar(2.5, DType::f32)}};
  const auto bytes = encode_checkpoint(in);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "PMCK");
  const auto out = decode_checkpoint(bytes);
  REQUIRE(out.size() == in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    CHECK(out[i].first == in[i].first);
    CHECK(bitwise_equal(out[i].second, in[i].second));
  }
  CHECK(encode_checkpoint(out) == bytes);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(truncated), IoError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), IoError);
}
