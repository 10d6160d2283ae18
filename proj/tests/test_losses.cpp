#include <cmath>
#include <limits>

#include "cnvs/losses.hpp"
#include "cnvs/ops.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cnvs;
using testing::rand64;

namespace {

Tensor image64(std::int64_t h, std::int64_t w, Rng& rng) { return uniform_tensor({h, w, 3}, 0.0, 0.8, rng, DType::f64); }

// Loop-based point loss: pooling, validity and differences done by hand on plain arrays.
double pts_oracle(const std::vector<double>& x, const std::vector<double>& g, const std::vector<double>& c,
                  const std::vector<double>& m, int h, int w, const LossWeights& lw) {
  auto pool = [](const std::vector<double>& v, int h, int w, int ch, int f) {
    std::vector<double> out(static_cast<std::size_t>((h / f) * (w / f) * ch), 0.0);
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        for (int k = 0; k < ch; ++k) {
          out[((y / f) * (w / f) + xx / f) * ch + k] += v[(y * w + xx) * ch + k] / (f * f);
        }
      }
    }
    return out;
  };
  double total = 0.0;
  for (int k = 0; k < lw.pts_scales; ++k) {
    const int f = 1 << k;
    if (h % f || w % f) {
      break;
    }
    const int hk = h / f, wk = w / f;
    const auto xk = pool(x, h, w, 3, f), gk = pool(g, h, w, 3, f), ck = pool(c, h, w, 1, f);
    std::vector<double> mk(static_cast<std::size_t>(hk * wk), 1.0);
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        if (m[y * w + xx] < 0.5) {
          mk[(y / f) * wk + xx / f] = 0.0;
        }
      }
    }
    double acc = 0.0;
    long count = 0;
    for (int y = 0; y < hk; ++y) {
      for (int xx = 0; xx < wk; ++xx) {
        const int p = y * wk + xx;
        for (const auto [dy, dx] : {std::pair{0, 1}, std::pair{1, 0}}) {
          if (y + dy >= hk || xx + dx >= wk) {
            continue;
          }
          const int q = (y + dy) * wk + xx + dx;
          if (mk[p] * mk[q] < 0.5) {
            continue;
          }
          ++count;
          for (int a = 0; a < 3; ++a) {
            acc += ck[p] * std::abs((xk[q * 3 + a] - xk[p * 3 + a]) - (gk[q * 3 + a] - gk[p * 3 + a]));
          }
        }
      }
    }
    if (count > 0) {
      total += std::ldexp(1.0, -k) * acc / (3.0 * count);
    }
  }
  double abs_sum = 0.0, log_sum = 0.0;
  long valid = 0;
  for (int p = 0; p < h * w; ++p) {
    if (m[p] < 0.5) {
      continue;
    }
    ++valid;
    log_sum += std::log(c[p]);
    for (int a = 0; a < 3; ++a) {
      abs_sum += c[p] * std::abs(x[p * 3 + a] - g[p * 3 + a]);
    }
  }
  if (valid > 0) {
    total += lw.abs * abs_sum / (3.0 * valid) - lw.conf * log_sum / valid;
  }
  return total;
}

BodyParams random_body(Rng& rng) {
  return {normal_tensor({kShapeDims}, 1.0, rng, DType::f64), normal_tensor({kPoseDims}, 1.0, rng, DType::f64),
          normal_tensor({kExprDims}, 1.0, rng, DType::f64), normal_tensor({kCamDims}, 1.0, rng, DType::f64)};
}

}  // namespace

TEST_CASE("image losses") {
  Rng rng(1);
  const Tensor a = image64(16, 16, rng), b = image64(16, 16, rng);
  CHECK(loss_nvs(a, a).item() == 0.0);
  const Tensor shifted = add_scalar(a, 0.1);
  CHECK(mse(shifted, a).item() == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(std::abs(gradient_surrogate(shifted, a).item()) < 1e-12);
  CHECK(loss_nvs(shifted, a).item() == doctest::Approx(0.01).epsilon(1e-9));
  CHECK(loss_nvs(a, b).item() == doctest::Approx(loss_nvs(b, a).item()).epsilon(1e-14));
  CHECK(loss_gs(a, b).item() == loss_nvs(a, b).item());
  CHECK(loss_nvs(a, b).item() > mse(a, b).item());
  LossWeights no_lpips;
  no_lpips.lpips = 0.0;
  CHECK(loss_nvs(a, b, no_lpips).item() == doctest::Approx(mse(a, b).item()).epsilon(1e-14));
  CHECK_THROWS_AS(loss_nvs(a, image64(16, 8, rng)), DimensionError);

  SUBCASE("surrogate matches a direct three-scale Sobel oracle") {
    auto sobel_l1 = [](const std::vector<double>& p, const std::vector<double>& q, int h, int w) {
      double s = 0.0;
      for (int y = 1; y + 1 < h; ++y) {
        for (int x = 1; x + 1 < w; ++x) {
          for (int c = 0; c < 3; ++c) {
            auto at = [&](const std::vector<double>& v, int yy, int xx) { return v[(yy * w + xx) * 3 + c]; };
            auto gx = [&](const std::vector<double>& v) {
              return (at(v, y - 1, x + 1) + 2 * at(v, y, x + 1) + at(v, y + 1, x + 1)) -
                     (at(v, y - 1, x - 1) + 2 * at(v, y, x - 1) + at(v, y + 1, x - 1));
            };
            auto gy = [&](const std::vector<double>& v) {
              return (at(v, y + 1, x - 1) + 2 * at(v, y + 1, x) + at(v, y + 1, x + 1)) -
                     (at(v, y - 1, x - 1) + 2 * at(v, y - 1, x) + at(v, y - 1, x + 1));
            };
            s += std::abs(gx(p) - gx(q)) + std::abs(gy(p) - gy(q));
          }
        }
      }
      return s / ((h - 2) * (w - 2) * 3 * 2);
    };
    double expect = 0.0;
    for (int f : {1, 2, 4}) {
      const auto pa = (f == 1 ? a : avg_pool2d(a, f)).to_vector();
      const auto pb = (f == 1 ? b : avg_pool2d(b, f)).to_vector();
      expect += sobel_l1(pa, pb, 16 / f, 16 / f) / 3.0;
    }
    CHECK(gradient_surrogate(a, b).item() == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("point loss") {
  Rng rng(2);
  const std::int64_t h = 8, w = 8;
  const Tensor gt = rand64({h, w, 3}, rng);
  const Tensor ones = Tensor::full({h, w, 1}, 1.0, DType::f64);
  std::vector<double> mv(h * w, 1.0);
  mv[9] = 0.0;
  mv[40] = 0.0;
  const Tensor mask = Tensor::from({h, w, 1}, mv, DType::f64);

  CHECK(loss_pts({gt, ones, {}}, gt, mask).item() == 0.0);

  LossWeights grad_only;
  grad_only.abs = 0.0;
  grad_only.conf = 0.0;
  const Tensor offset = add(gt, Tensor::from({3}, {0.3, -0.2, 0.5}, DType::f64));
  CHECK(std::abs(loss_pts({offset, ones, {}}, gt, mask, grad_only).item()) < 1e-12);

  SUBCASE("single-pixel step edge at the finest scale") {
    LossWeights lw = grad_only;
    lw.pts_scales = 1;
    const Tensor zero = Tensor::zeros({h, w, 3}, DType::f64);
    std::vector<double> xv(h * w * 3, 0.0);
    const int py = 3, px = 5;
    xv[(py * w + px) * 3 + 0] = 0.5;
    xv[(py * w + px) * 3 + 1] = -0.2;
    xv[(py * w + px) * 3 + 2] = 0.1;
    const Tensor conf = uniform_tensor({h, w, 1}, 0.5, 1.5, rng, DType::f64);
    const auto cv = conf.to_vector();
    // The step shows up in the two differences that end at the pixel (weighted by the
    // confidence of their first end) and in the two that start there.
    const double step = 0.5 + 0.2 + 0.1;
    const double hand = step * (cv[py * w + px - 1] + cv[(py - 1) * w + px] + 2 * cv[py * w + px]);
    const double pairs = 2.0 * h * (w - 1);
    const double expect = hand / (3.0 * pairs);
    const Tensor full_mask = Tensor::full({h, w, 1}, 1.0, DType::f64);
    CHECK(loss_pts({Tensor::from({h, w, 3}, xv, DType::f64), conf, {}}, zero, full_mask, lw).item() ==
          doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("matches the loop oracle with every term active") {
    const Tensor x = rand64({h, w, 3}, rng);
    const Tensor conf = uniform_tensor({h, w, 1}, 0.2, 2.0, rng, DType::f64);
    const LossWeights lw;
    const double got = loss_pts({x, conf, {}}, gt, mask, lw).item();
    const double want = pts_oracle(x.to_vector(), gt.to_vector(), conf.to_vector(), mv, h, w, lw);
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
    LossWeights three = lw;
    three.pts_scales = 3;
    CHECK(loss_pts({x, conf, {}}, gt, mask, three).item() ==
          doctest::Approx(pts_oracle(x.to_vector(), gt.to_vector(), conf.to_vector(), mv, h, w, three))
              .epsilon(1e-12));
  }

  SUBCASE("empty mask leaves nothing to compare") {
    const Tensor none = Tensor::zeros({h, w, 1}, DType::f64);
    CHECK(loss_pts({rand64({h, w, 3}, rng), ones, {}}, gt, none).item() == 0.0);
  }

  CHECK_THROWS_AS(loss_pts({gt, ones, {}}, rand64({h, w + 1, 3}, rng), mask), DimensionError);
  CHECK_THROWS_AS(loss_pts({gt, Tensor::full({h, w, 3}, 1.0, DType::f64), {}}, gt, mask), DimensionError);
}

TEST_CASE("body parameter loss") {
  Rng rng(3);
  const BodyParams a = random_body(rng), b = random_body(rng);
  CHECK(loss_smplx(a, a).item() == 0.0);
  BodyParams unit = a;
  std::vector<double> beta = a.beta.to_vector();
  beta[4] += 1.0;
  unit.beta = Tensor::from({kShapeDims}, beta, DType::f64);
  CHECK(loss_smplx(unit, a).item() == doctest::Approx(1.0).epsilon(1e-12));
  double brute = 0.0;
  for (auto [s, t] : {std::pair{&a.beta, &b.beta}, std::pair{&a.theta, &b.theta}, std::pair{&a.psi, &b.psi},
                      std::pair{&a.cam, &b.cam}}) {
    double group = 0.0;
    for (std::int64_t i = 0; i < s->numel(); ++i) {
      group += (s->at(i) - t->at(i)) * (s->at(i) - t->at(i));
    }
    brute += group;
  }
  CHECK(loss_smplx(a, b).item() == doctest::Approx(brute).epsilon(1e-12));
  BodyParams short_beta = a;
  short_beta.beta = Tensor::zeros({3}, DType::f64);
  CHECK_THROWS_AS(loss_smplx(short_beta, a), DimensionError);
}

TEST_CASE("distillation loss") {
  Rng rng(4);
  std::vector<Tensor> t;
  for (int i = 0; i < 6; ++i) {
    t.push_back(rand64({5, 4}, rng));
  }
  CHECK(loss_distill(t, t).item() == 0.0);
  auto s = t;
  s[2] = add_scalar(t[2], 0.3);
  CHECK(loss_distill(s, t).item() == doctest::Approx(0.09 / 6).epsilon(1e-10));
  auto rs = s, rt = t;
  std::reverse(rs.begin(), rs.end());
  std::reverse(rt.begin(), rt.end());
  CHECK(loss_distill(rs, rt).item() == doctest::Approx(loss_distill(s, t).item()).epsilon(1e-14));
  CHECK_THROWS_AS(loss_distill({t[0]}, t), DimensionError);
  CHECK_THROWS_AS(loss_distill({t[0]}, {rand64({4, 4}, rng)}), DimensionError);
}

TEST_CASE("weighted total") {
  const LossWeights lw;
  const Tensor one = Tensor::scalar(1.0, DType::f64), zero = Tensor::scalar(0.0, DType::f64);
  CHECK(loss_total({zero, zero, zero, zero, {}}, lw).report.total == 0.0);
  const auto unit = loss_total({one, one, one, one, {}}, lw, 7);
  CHECK(unit.report.total == 103.0);
  CHECK(unit.total.item() == 103.0);
  CHECK(unit.report.step == 7);
  LossWeights doubled = lw;
  doubled.pts *= 2.0;
  CHECK(loss_total({one, one, one, one, {}}, doubled).report.total == 203.0);

  Rng rng(5);
  const Tensor a = Tensor::scalar(0.37, DType::f64), b = Tensor::scalar(0.012, DType::f64),
               c = Tensor::scalar(0.004, DType::f64), d = Tensor::scalar(1.9, DType::f64),
               e = Tensor::scalar(0.05, DType::f64);
  const auto r = loss_total({a, b, c, d, e}, lw).report;
  const double recomputed = 1.0 * r.nvs + 1.0 * r.gs + 100.0 * r.pts + 1.0 * r.smplx + 1.0 * r.distill;
  CHECK(r.total == doctest::Approx(recomputed).epsilon(1e-12));
  CHECK(r.pts == 0.004);

  const Tensor nan = Tensor::scalar(std::numeric_limits<double>::quiet_NaN(), DType::f64);
  try {
    loss_total({one, one, nan, one, {}}, lw, 12);
    FAIL("expected NumericError");
  } catch (const NumericError& err) {
    CHECK(std::string(err.what()).find("pts") != std::string::npos);
    CHECK(std::string(err.what()).find("12") != std::string::npos);
  }
  CHECK(LossReport::csv_header() == "step,nvs,gs,pts,smplx,distill,total");
  CHECK(unit.report.csv_row() == "7,1,1,1,1,0,103");

  LossWeights bad;
  bad.gs = -1.0;
  CHECK_THROWS_AS(loss_total({one, one, one, one, {}}, bad), ConfigError);
}
