#include <cmath>
#include <filesystem>
#include <fstream>

#include "cnvs/image_io.hpp"
#include "cnvs/synth.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace cnvs;
using testing::bitwise_equal;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cnvs_synth_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

SyntheticScene single_capsule(double radius) {
  SyntheticScene s;
  s.capsules.push_back({kSubjectCenter - Eigen::Vector3d(0, 0.5, 0), kSubjectCenter + Eigen::Vector3d(0, 0.5, 0),
                        radius, 0, BodyRegion::torso, Eigen::Matrix3d::Identity()});
  s.albedo.push_back({1.0, 1.0, 1.0});
  s.light = {0.0, 0.0, 1.0};
  return s;
}

}  // namespace

TEST_CASE("camera sampling stays inside the frustum") {
  const auto cams = sample_cameras(7, 16);
  REQUIRE(cams.size() == 16);
  CHECK(view_angles(cams[0]).norm() < 1e-9);
  for (const auto& c : cams) {
    CHECK(std::abs((c.center() - kSubjectCenter).norm() - kCameraRadius) < 1e-12);
    const Eigen::Vector2d a = view_angles(c);
    CHECK(std::abs(a.x()) <= kFrustumHalfAngleDeg + 1e-9);
    CHECK(std::abs(a.y()) <= kFrustumHalfAngleDeg + 1e-9);
    // The subject center projects to the principal point.
    const auto px = c.project(kSubjectCenter);
    REQUIRE(px);
    CHECK(std::abs(px->x() - 32.0) < 1e-9);
    CHECK(std::abs(px->y() - 32.0) < 1e-9);
  }
  for (int k = 12; k < 16; ++k) {
    const Eigen::Vector2d a = view_angles(cams[static_cast<std::size_t>(k)]);
    CHECK(std::abs(std::abs(a.x()) - 30.0) < 1e-9);
    CHECK(std::abs(std::abs(a.y()) - 30.0) < 1e-9);
  }
  // Positive pitch looks from above.
  CHECK(orbit_camera(0, 20, 64, 64).center().y() > kSubjectCenter.y());
  const auto again = sample_cameras(7, 16);
  for (std::size_t i = 0; i < cams.size(); ++i) {
    CHECK(format_pose(cams[i]) == format_pose(again[i]));
  }
  CHECK_THROWS_AS(sample_cameras(1, 4), ConfigError);
  CHECK(std::abs(focal_for_width(64) - 32.0 / std::tan(std::numbers::pi / 6)) < 1e-12);
}

TEST_CASE("random identities") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const SyntheticScene s = SyntheticScene::random(seed);
    CHECK(std::abs(s.height - kTargetHeight) <= kHeightTolerance);
    CHECK(s.capsules.size() == 15);
    CHECK(s.albedo.size() == s.capsules.size());
    CHECK_NOTHROW(s.body.validate());
    const Eigen::Vector3d t = placement_from_cam(s.body.cam.at(0), s.body.cam.at(1), s.body.cam.at(2));
    CHECK(std::abs(t.x()) <= kPlacementJitter + 1e-12);
    CHECK(std::abs(t.y()) < 1e-12);
    CHECK(std::abs(t.z()) <= kPlacementJitter + 1e-12);
  }
  const SyntheticScene a = SyntheticScene::random(3), b = SyntheticScene::random(3);
  CHECK(format_body_params(a.body) == format_body_params(b.body));
  CHECK(format_body_params(a.body) != format_body_params(SyntheticScene::random(4).body));
}

TEST_CASE("ray casting against a single capsule") {
  const double r = 0.2;
  const SyntheticScene s = single_capsule(r);
  const Eigen::Vector3d eye = kSubjectCenter + Eigen::Vector3d(0, 0, 2);
  const auto hit = intersect_scene(s, eye, {0, 0, -1});
  REQUIRE(hit);
  CHECK(std::abs(hit->t - (2.0 - r)) < 1e-12);
  CHECK((hit->normal - Eigen::Vector3d(0, 0, 1)).norm() < 1e-12);
  // Through the top cap.
  const auto cap = intersect_scene(s, kSubjectCenter + Eigen::Vector3d(0, 2.5, 0), {0, -1, 0});
  REQUIRE(cap);
  CHECK(std::abs(cap->t - (2.0 - r)) < 1e-12);
  CHECK_FALSE(intersect_scene(s, eye, {0, 0, 1}));
  CHECK_FALSE(intersect_scene(s, eye + Eigen::Vector3d(0.3, 0, 0), {0, 0, -1}));

  // Silhouette width: the horizontal extent of the mask at the center row matches the
  // analytic tangent rays, and the depth at the center column is 2 - r.
  const CameraPose cam = orbit_camera(0, 0, 64, 64);
  const GroundTruthView gt = render_gt(s, cam, DType::f64);
  int hits = 0;
  for (int u = 0; u < 64; ++u) {
    hits += gt.mask.at(31 * 64 + u) > 0.5 ? 1 : 0;
  }
  const double half = std::asin(r / 2.0);
  const double expected = 2.0 * std::tan(half) * cam.fx;
  CHECK(std::abs(hits - expected) <= 2.0);
  CHECK(std::abs(gt.points.at((31 * 64 + 31) * 3 + 2) + (2.0 - r)) < 2e-3);

  const SyntheticScene empty;
  const GroundTruthView none = render_gt(empty, cam, DType::f64);
  CHECK(none.mask.to_vector() == std::vector<double>(64 * 64, 0.0));
}

TEST_CASE("ground truth geometry is consistent across views") {
  const SyntheticScene s = SyntheticScene::random(11);
  const auto cams = sample_cameras(11, 6);
  const GroundTruthView a = render_gt(s, cams[0], DType::f64);
  const auto& ca = cams[0];
  const auto& cb = cams[5];
  int on = 0, shared = 0;
  double worst_px = 0.0, worst_m = 0.0;
  for (int v = 0; v < 64; ++v) {
    for (int u = 0; u < 64; ++u) {
      const auto p = static_cast<std::int64_t>(v * 64 + u);
      if (a.mask.at(p) < 0.5) {
        CHECK(a.image.at(p * 3) == 0.0);
        continue;
      }
      ++on;
      const Eigen::Vector3d x(a.points.at(p * 3), a.points.at(p * 3 + 1), a.points.at(p * 3 + 2));
      const auto px = ca.project_camera(x);
      REQUIRE(px);
      worst_px = std::max(worst_px, (*px - Eigen::Vector2d(u + 0.5, v + 0.5)).norm());
      // Visible from the second camera too: casting from there lands on the same point.
      const Eigen::Vector3d w = ca.to_world(x);
      const Eigen::Vector3d d = (w - cb.center()).normalized();
      const auto hb = intersect_scene(s, cb.center(), d);
      REQUIRE(hb);
      if (std::abs(hb->t - (w - cb.center()).norm()) < 1e-6) {
        ++shared;
        worst_m = std::max(worst_m, (hb->point - w).norm());
      }
    }
  }
  CHECK(on > 300);
  CHECK(shared > on / 3);
  CHECK(worst_px < 1e-3);
  CHECK(worst_m < 1e-4);
}

TEST_CASE("dataset generation and loading") {
  CHECK(sha256_hex({'a', 'b', 'c'}) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");

  const auto dir = scratch("ds");
  DatasetConfig cfg;
  cfg.identities = 2;
  cfg.views = 5;
  cfg.width = 16;
  cfg.height = 16;
  cfg.seed = 9;
  const Manifest m = make_dataset(cfg, dir);
  CHECK(m.sample_count() == 10);
  CHECK(m.entries.size() == 2 * (1 + 5 * 3));
  const Manifest back = Manifest::read(dir / "manifest.csv");
  CHECK(back.format() == m.format());
  CHECK_THROWS_AS(Manifest::parse("identity,view,role,path,sha256\n0,1,image\n"), IoError);

  const Dataset ds = load_dataset(dir / "manifest.csv", DType::f32);
  REQUIRE(ds.identities.size() == 2);
  CHECK(ds.width == 16);
  CHECK(ds.identities[1].views.size() == 5);
  CHECK(ds.identities[1].views[0].view == 0);

  // A withheld view regenerates exactly from the identity seed.
  const SyntheticScene scene = SyntheticScene::random(identity_seed(cfg.seed, 1));
  CHECK(format_body_params(scene.body) == format_body_params(ds.identities[1].body));
  const auto cams = sample_cameras(identity_seed(cfg.seed, 1) ^ 0xC0FFEEULL, cfg.views, 16, 16);
  const GroundTruthView gt = render_gt(scene, cams[4], DType::f32);
  CHECK(bitwise_equal(gt.points, ds.identities[1].views[4].points));
  CHECK(bitwise_equal(gt.mask, ds.identities[1].views[4].mask));

  // Regeneration is byte-identical.
  const auto dir2 = scratch("ds2");
  CHECK(make_dataset(cfg, dir2).format() == m.format());

  // Tampering is caught.
  {
    std::ofstream f(dir / "id000" / "view002.ppm", std::ios::binary | std::ios::app);
    f << 'x';
  }
  CHECK_THROWS_AS(load_dataset(dir / "manifest.csv"), IoError);
  std::filesystem::remove(dir / "id000" / "view002.ppm");
  CHECK_THROWS_AS(load_dataset(dir / "manifest.csv"), IoError);
  CHECK_THROWS_AS(load_dataset(dir / "nope.csv"), IoError);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}
