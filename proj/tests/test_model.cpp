#include <cmath>
#include <filesystem>
#include <numbers>

#include "cnvs/model.hpp"
#include "cnvs/ops.hpp"
#include "cnvs/optim.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cnvs;
using testing::bitwise_equal;
using testing::max_abs_diff;

namespace {

CameraPose view(double yaw_deg, int size) {
  const double yaw = yaw_deg * std::numbers::pi / 180.0;
  const Eigen::Vector3d eye = kSubjectCenter + kCameraRadius * Eigen::Vector3d(std::sin(yaw), 0.0, std::cos(yaw));
  const double focal = 0.5 * size / std::tan(std::numbers::pi / 6.0);
  return CameraPose::look_at(eye, kSubjectCenter, {0, 1, 0}, focal, size, size);
}

CascadeConfig small_config(DType dtype = DType::f32) {
  CascadeConfig c;
  c.encoder_layers = 2;
  c.decoder_layers = 4;
  c.group_size = 3;
  c.dim = 16;
  c.heads = 2;
  c.patch = 8;
  c.height = 32;
  c.width = 32;
  c.prior_channels = 4;
  c.triplane_resolution = 8;
  c.dtype = dtype;
  return c;
}

ForwardInput sample_input(const CascadeConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return {uniform_tensor({c.height, c.width, 3}, 0.0, 1.0, rng, c.dtype), view(0.0, c.width),
          view(std::uniform_real_distribution<double>(-30.0, 30.0)(rng), c.width)};
}

void zero_block_outputs(ModelState& s) {
  for (auto& b : s.blocks) {
    for (Tensor* t : {&b.wo, &b.bo, &b.w2, &b.b2}) {
      for (auto& v : t->mutable_data<float>()) {
        v = 0.0f;
      }
    }
  }
}

void fill(Tensor& t, double value) {
  dispatch(t.dtype(), [&]<class T>() {
    for (auto& v : t.mutable_data<T>()) {
      v = static_cast<T>(value);
    }
  });
}

}  // namespace

TEST_CASE("configuration checks") {
  CascadeConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.trace_layers() == std::vector<int>{5, 11, 17, 23, 29, 35});
  CHECK(c.tokens_per_view() == 64);
  c.decoder_layers = 23;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = CascadeConfig{};
  c.height = 60;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = CascadeConfig{};
  c.heads = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("fresh injection parameters are exactly zero") {
  const auto s = ModelState::init(small_config(), 1);
  auto inject = s.inject;
  for (Tensor* t : inject.tensors()) {
    for (double v : t->to_vector()) {
      CHECK(v == 0.0);
    }
  }
  CHECK(s.layout.count(AttnKind::full) == 6);
}

TEST_CASE("stage stacks") {
  const auto c = small_config();
  auto s = ModelState::init(c, 2);
  Rng rng(3);
  const Tensor x = normal_tensor({2 * c.tokens_per_view(), c.dim}, 1.0, rng, c.dtype);
  CHECK(encode_stage1(x, s).shape() == x.shape());
  CHECK(decode_stage3(x, s).shape() == x.shape());
  CHECK_FALSE(bitwise_equal(encode_stage1(x, s), x));

  SUBCASE("empty encoder passes tokens through") {
    auto c0 = c;
    c0.encoder_layers = 0;
    c0.decoder_layers = 6;
    const auto s0 = ModelState::init(c0, 2);
    CHECK(bitwise_equal(encode_stage1(x, s0), x));
    auto c1 = c;
    c1.encoder_layers = 6;
    c1.decoder_layers = 0;
    CHECK(bitwise_equal(decode_stage3(x, ModelState::init(c1, 2)), x));
  }
  SUBCASE("zero output projections make every block the identity") {
    zero_block_outputs(s);
    CHECK(bitwise_equal(encode_stage1(x, s), x));
    CHECK(bitwise_equal(decode_stage3(x, s), x));
  }
  SUBCASE("trace records the listed layers") {
    std::vector<Tensor> trace;
    const Tensor mid = encode_stage1(x, s, {0, 1, 4}, &trace);
    const Tensor out = decode_stage3(mid, s, {0, 1, 4}, &trace);
    REQUIRE(trace.size() == 3);
    CHECK(bitwise_equal(trace[1], mid));
    CHECK_FALSE(bitwise_equal(trace[2], out));
  }
  SUBCASE("a short layout is a configuration error") {
    s.layout.kinds.resize(1);
    CHECK_THROWS_AS(encode_stage1(x, s), ConfigError);
    CHECK_THROWS_AS(decode_stage3(x, s), ConfigError);
  }
}

TEST_CASE("prior injection") {
  auto c = small_config(DType::f64);
  auto s = ModelState::init(c, 4);
  Rng rng(5);
  const std::int64_t n = c.tokens_per_view(), rows = c.grid_rows(), cols = c.grid_cols();
  const Tensor t_mid = normal_tensor({2 * n, c.dim}, 1.0, rng, c.dtype);
  const Tensor t_in = normal_tensor({2 * n, c.dim}, 1.0, rng, c.dtype);
  const Tensor fs = normal_tensor({rows, cols, c.prior_channels}, 1.0, rng, c.dtype);
  const Tensor fp = normal_tensor({rows, cols, c.prior_channels}, 1.0, rng, c.dtype);

  CHECK(bitwise_equal(inject_priors(t_mid, t_in, fs, fp, s.inject), t_mid));

  auto p = InjectionParams::zeros(c.prior_channels, c.dim, c.dtype);
  fill(p.gamma_res, 1.0);
  CHECK(max_abs_diff(inject_priors(t_mid, t_in, fs, fp, p), add(t_mid, t_in)) == 0.0);

  // One conv weight perturbed: invisible while its gate is closed, then exactly gate * delta * feature.
  auto q = InjectionParams::zeros(c.prior_channels, c.dim, c.dtype);
  const std::int64_t ch = 2, out = 5;
  const double delta = 0.25;
  q.smpl_w.mutable_data<double>()[static_cast<std::size_t>(ch * c.dim + out)] = delta;
  CHECK(bitwise_equal(inject_priors(t_mid, t_in, fs, fp, q), t_mid));
  fill(q.gamma_smpl, 0.5);
  const Tensor moved = inject_priors(t_mid, t_in, fs, fp, q);
  double worst = 0.0;
  for (std::int64_t tok = 0; tok < 2 * n; ++tok) {
    for (std::int64_t j = 0; j < c.dim; ++j) {
      const std::int64_t i = tok * c.dim + j;
      double expect = t_mid.at(i);
      if (tok >= n && j == out) {
        expect += 0.5 * delta * fs.at((tok - n) * c.prior_channels + ch);
      }
      worst = std::max(worst, std::abs(moved.at(i) - expect));
    }
  }
  CHECK(worst < 1e-15);

  CHECK_THROWS_AS(inject_priors(t_mid, t_in, Tensor::zeros({rows, cols + 1, c.prior_channels}, c.dtype), fp, p),
                  DimensionError);
  CHECK_THROWS_AS(inject_priors(slice(t_mid, 0, 0, n), slice(t_in, 0, 0, n), fs, fp, p), DimensionError);
}

TEST_CASE("output heads") {
  const auto c = small_config(DType::f64);
  auto s = ModelState::init(c, 6);
  Rng rng(7);
  const std::int64_t n = c.tokens_per_view();
  const Tensor tokens = normal_tensor({n, c.dim}, 1.0, rng, c.dtype);
  const CameraPose pose = view(12.0, c.width);

  SUBCASE("random weights stay inside the activation ranges") {
    const Tensor img = nvs_head(tokens, s);
    CHECK(img.shape() == Shape{c.height, c.width, 3});
    for (double v : img.to_vector()) {
      CHECK((v > 0.0 && v < 1.0));
    }
    // Unpatchify layout: patchifying the image recovers the per-token head output.
    const Tensor direct = sigmoid(add(matmul(tokens, s.nvs_w), s.nvs_b));
    CHECK(max_abs_diff(patchify(img, c.patch), direct) == 0.0);

    auto big = s;
    big.gs_w = param(normal_tensor(s.gs_w.shape(), 1.0, rng, c.dtype));
    const GaussianSet g = gaussian_head(tokens, pose, big);
    CHECK(g.size() == c.height * c.width);
    for (double v : g.scales.to_vector()) {
      CHECK((v >= std::exp(kLogScaleMin) && v <= 1.0));
    }
    for (const Tensor* t : {&g.opacity, &g.colors}) {
      for (double v : t->to_vector()) {
        CHECK((v > 0.0 && v < 1.0));
      }
    }
  }
  SUBCASE("zero weights give the activations at zero") {
    fill(s.nvs_w, 0.0);
    fill(s.nvs_b, 0.0);
    fill(s.gs_w, 0.0);
    fill(s.gs_b, 0.0);
    for (double v : nvs_head(tokens, s).to_vector()) {
      CHECK(v == 0.5);
    }
    const GaussianSet g = gaussian_head(tokens, pose, s);
    for (double v : g.opacity.to_vector()) {
      CHECK(v == 0.5);
    }
    for (double v : g.colors.to_vector()) {
      CHECK(v == 0.5);
    }
    // Log-scale halfway between its bounds.
    for (double v : g.scales.to_vector()) {
      CHECK(std::abs(v - std::exp(0.5 * (kLogScaleMin + kLogScaleMax))) < 1e-12);
    }
    // Means sit ln 2 along each pixel's ray.
    double worst = 0.0;
    for (int v = 0; v < c.height; ++v) {
      for (int u = 0; u < c.width; ++u) {
        const Eigen::Vector3d want = pose.center() + std::log(2.0) * pose.pixel_direction(u, v);
        for (int a = 0; a < 3; ++a) {
          worst = std::max(worst, std::abs(g.means.at((v * c.width + u) * 3 + a) - want[a]));
        }
      }
    }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("forward pass") {
  const auto c = small_config();
  const auto s = ModelState::init(c, 8);
  const auto in = sample_input(c, 9);
  const auto a = forward(s, in);
  const auto b = forward(s, in);
  CHECK(bitwise_equal(a.image, b.image));
  CHECK(bitwise_equal(a.gaussians.means, b.gaussians.means));
  CHECK(a.trace.size() == 2);
  CHECK(a.t_in.shape() == Shape{2 * c.tokens_per_view(), c.dim});
  CHECK(a.points.points.shape() == Shape{c.height, c.width, 3});
  CHECK(a.f_smpl.shape() == Shape{c.grid_rows(), c.grid_cols(), c.prior_channels});

  SUBCASE("fresh injection equals the prior-free model") {
    ForwardOptions ablate;
    ablate.ablate_priors = true;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto input = sample_input(c, 100 + seed);
      const auto with = forward(s, input);
      const auto without = forward(s, input, ablate);
      CHECK(max_abs_diff(with.image, without.image) < 1e-6);
      CHECK(max_abs_diff(with.gaussians.means, without.gaussians.means) < 1e-6);
      CHECK_FALSE(without.body.theta.defined());
    }
  }
  SUBCASE("kernel swaps keep every shape") {
    auto hybrid = s;
    hybrid.layout.kinds[1] = AttnKind::linear;
    hybrid.layout.kinds[3] = AttnKind::linear;
    const auto h = forward(hybrid, in);
    CHECK(h.image.shape() == a.image.shape());
    CHECK(h.t_mid.shape() == a.t_mid.shape());
    for (std::size_t i = 0; i < h.trace.size(); ++i) {
      CHECK(h.trace[i].shape() == a.trace[i].shape());
    }
    CHECK_FALSE(bitwise_equal(h.image, a.image));
  }
  SUBCASE("checkpoint round trip reproduces outputs bitwise") {
    auto hybrid = s;
    hybrid.layout.kinds[4] = AttnKind::linear;
    const auto path = std::filesystem::temp_directory_path() / "cnvs_model_roundtrip.pmck";
    save_model(path, hybrid);
    const auto loaded = load_model(path);
    std::filesystem::remove(path);
    CHECK(loaded.layout == hybrid.layout);
    const auto want = hybrid.named(), got = loaded.named();
    REQUIRE(want.size() == got.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(want[i].first == got[i].first);
      CHECK(bitwise_equal(want[i].second, got[i].second));
    }
    CHECK(bitwise_equal(forward(loaded, in).image, forward(hybrid, in).image));
  }
  SUBCASE("clone shares no storage") {
    auto copy = s.clone();
    fill(copy.nvs_b, 3.0);
    CHECK(s.nvs_b.to_vector()[0] == 0.0);
  }
  SUBCASE("parameter groups partition the state") {
    CHECK(s.backbone_params().size() + s.head_params().size() == s.all_params().size());
    CHECK(s.named().size() == s.all_params().size() + 2);
    CHECK(s.named()[2].first == "tokenizer.source.weight");
  }
  CHECK_THROWS_AS(model_from_named({}), IoError);
}

TEST_CASE("end-to-end gradients of a micro model") {
  CascadeConfig c;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.group_size = 1;
  c.dim = 8;
  c.heads = 2;
  c.patch = 8;
  c.height = 16;
  c.width = 16;
  c.prior_channels = 3;
  c.triplane_resolution = 4;
  c.dtype = DType::f64;
  auto s = ModelState::init(c, 10);
  // Open the gates so every branch carries signal.
  Rng rng(11);
  for (Tensor* t : s.inject.tensors()) {
    *t = param(normal_tensor(t->shape(), 0.3, rng, c.dtype));
  }
  const auto in = sample_input(c, 12);
  auto probe = [](const Tensor& y, std::uint64_t seed) {
    Rng r(seed);
    return sum(mul(y, normal_tensor(y.shape(), 1.0, r, DType::f64)));
  };
  auto f = [&] {
    const auto r = forward(s, in);
    Tensor total = add(probe(r.image, 1), probe(r.gaussians.means, 2));
    total = add(total, probe(r.gaussians.scales, 3));
    total = add(total, probe(r.gaussians.colors, 4));
    total = add(total, probe(r.points.points, 5));
    total = add(total, probe(r.body.theta, 6));
    return add(total, probe(r.trace[0], 7));
  };
  const std::vector<Tensor> params{s.source_proj.bias,  s.blocks[0].bq,        s.blocks[1].b1, s.inject.gamma_smpl,
                                   s.inject.gamma_pts,  s.inject.gamma_res,    s.inject.smpl_b, s.smplx.head_b,
                                   s.points.head_b,     s.nvs_b,               s.gs_b,          s.blocks[1].ln2_gamma,
                                   s.triplane.xy,       s.smplx.adapter.b2,    s.points.adapter.b1};
  CHECK(grad_check(f, params) < 1e-4);
}
