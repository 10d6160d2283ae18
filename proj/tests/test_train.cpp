#include <filesystem>
#include <limits>
#include <set>

#include "cnvs/config.hpp"
#include "cnvs/train.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cnvs;
using testing::bitwise_equal;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.apply_text(
      "encoder_layers = 2\n"
      "decoder_layers = 4\n"
      "group_size = 3\n"
      "dim = 16\n"
      "heads = 2\n"
      "height = 32\n"
      "width = 32\n"
      "prior_channels = 4\n"
      "triplane_resolution = 8\n"
      "identities = 1\n"
      "views = 5\n"
      "train_views = 3\n"
      "batch = 2\n"
      "checkpoint_every = 2\n");
  return c;
}

const Dataset& tiny_dataset() {
  static const Dataset ds = [] {
    const auto dir = std::filesystem::temp_directory_path() / "cnvs_train_ds";
    std::filesystem::remove_all(dir);
    make_dataset(tiny_config().data, dir);
    return load_dataset(dir / "manifest.csv");
  }();
  return ds;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cnvs_train_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

std::string read_text(const std::filesystem::path& p) {
  const auto b = read_file_bytes(p);
  return {b.begin(), b.end()};
}

}  // namespace

TEST_CASE("run configuration text") {
  RunConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.backbone_rate == 1e-5);
  CHECK(c.head_rate == 2e-4);
  CHECK(c.weight_decay == 1e-5);
  CHECK(c.min_rate == 1e-6);
  CHECK(c.distill_rate == 1e-6);
  CHECK(c.data.identities * c.data.views == 128);

  const std::string dump = c.dump();
  CHECK(dump.find("backbone_rate = 1e-05") != std::string::npos);
  CHECK(dump.find("lambda_pts = 100") != std::string::npos);
  std::size_t lines = 0, paper = 0;
  for (std::size_t pos = 0; (pos = dump.find('\n', pos)) != std::string::npos; ++pos) {
    ++lines;
  }
  for (std::size_t pos = 0; (pos = dump.find("# [paper]", pos)) != std::string::npos; ++pos) {
    ++paper;
  }
  CHECK(lines > 30);
  CHECK(paper > 10);
  CHECK(dump.find("# [artifact]") != std::string::npos);

  RunConfig d = tiny_config();
  d.seed = 77;
  d.data.seed = 77;
  d.trace_layers = {2, 5};
  RunConfig e;
  e.apply_text(d.dump());
  CHECK(e.dump() == d.dump());
  CHECK(e.model.dim == 16);
  CHECK(e.data.width == 32);
  CHECK(e.data.seed == 77);
  CHECK(e.effective_trace_layers() == std::vector<int>{2, 5});
  CHECK(e.train_view_indices() == std::vector<int>{0, 1, 2});
  CHECK(e.heldout_view_indices() == std::vector<int>{3, 4});

  CHECK_THROWS_AS(e.set("bogus", "1"), ConfigError);
  CHECK_THROWS_AS(e.set("dim", "sixteen"), ConfigError);
  CHECK_THROWS_AS(e.set("dtype", "f16"), ConfigError);
  CHECK_THROWS_AS(e.apply_text("dim 16\n"), ConfigError);
  e.set("train_views", "9");
  CHECK_THROWS_AS(e.validate(), ConfigError);
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/run.cfg"), IoError);
}

TEST_CASE("examples and batches") {
  const auto ex = make_examples(tiny_dataset(), {1, 2}, DType::f32);
  REQUIRE(ex.size() == 2);
  CHECK(ex[0].source_view == 0);
  CHECK(ex[1].target_view == 2);
  CHECK(ex[0].target_image.dtype() == DType::f32);
  CHECK(ex[0].body.theta.dtype() == DType::f32);
  CHECK_THROWS_AS(make_examples(tiny_dataset(), {9}, DType::f32), ConfigError);

  BatchSampler a(5, 2, 3), b(5, 2, 3);
  std::multiset<std::size_t> epoch;
  for (int i = 0; i < 5; ++i) {
    const auto x = a.next();
    CHECK(x == b.next());
    epoch.insert(x.begin(), x.end());
  }
  // Two full epochs: every index exactly twice.
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(epoch.count(i) == 2);
  }
}

TEST_CASE("teacher training") {
  SUBCASE("zero steps saves the initialization") {
    RunConfig c = tiny_config();
    c.steps = 0;
    const auto dir = scratch("zero");
    train_teacher(c, tiny_dataset(), {dir});
    const ModelState init = ModelState::init(c.model, c.seed);
    CHECK(encode_checkpoint(load_model(dir / "teacher.pmck").named()) == encode_checkpoint(init.named()));
    CHECK(read_text(dir / "loss.csv") == LossReport::csv_header() + "\n");
  }
  SUBCASE("rows, checkpoints and determinism") {
    RunConfig c = tiny_config();
    c.steps = 5;
    c.head_rate = 1e-3;
    const auto dir = scratch("five");
    int calls = 0;
    const ModelState m = train_teacher(c, tiny_dataset(), {dir}, [&](const LossReport& r) { CHECK(r.step == ++calls); });
    CHECK(calls == 5);
    const std::string csv = read_text(dir / "loss.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
    CHECK(std::filesystem::exists(dir / "teacher_000002.pmck"));
    CHECK(std::filesystem::exists(dir / "teacher_000004.pmck"));
    CHECK_FALSE(std::filesystem::exists(dir / "teacher_000005.pmck"));
    CHECK(parameter_hash(m) != parameter_hash(ModelState::init(c.model, c.seed)));

    const auto dir2 = scratch("five_again");
    const ModelState m2 = train_teacher(c, tiny_dataset(), {dir2});
    CHECK(parameter_hash(m2) == parameter_hash(m));
    CHECK(read_text(dir2 / "loss.csv") == csv);

    const MetricReport r1 = evaluate(m, tiny_dataset(), c.heldout_view_indices());
    const MetricReport r2 = evaluate(load_model(dir / "teacher.pmck"), tiny_dataset(), c.heldout_view_indices());
    CHECK(r1.count() == 2);
    CHECK(r1.csv() == r2.csv());
    CHECK(std::isfinite(r1.mean_psnr));
  }
  SUBCASE("non-finite loss aborts with the step") {
    RunConfig c = tiny_config();
    c.steps = 3;
    c.batch = 3;
    Dataset poisoned = tiny_dataset();
    for (auto& v : poisoned.identities[0].views) {
      if (v.view == 2) {
        v.image = Tensor::full(v.image.shape(), std::numeric_limits<double>::quiet_NaN(), DType::f32);
      }
    }
    const auto dir = scratch("nan");
    try {
      train_teacher(c, poisoned, {dir});
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("at step 1") != std::string::npos);
    }
  }
}

TEST_CASE("single view rendering") {
  const RunConfig c = tiny_config();
  const ModelState m = ModelState::init(c.model, 4);
  const auto& v0 = tiny_dataset().identities[0].views[0];
  const auto& v3 = tiny_dataset().identities[0].views[3];
  const ForwardResult a = render_view(m, v0.image, v0.pose, v3.pose);
  const ForwardResult b = render_view(m, v0.image, v0.pose, v3.pose);
  CHECK(a.image.shape() == Shape{32, 32, 3});
  CHECK(bitwise_equal(a.image, b.image));
  CHECK_FALSE(a.image.requires_grad());
}
