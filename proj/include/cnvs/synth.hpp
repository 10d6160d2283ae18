#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cnvs/camera.hpp"
#include "cnvs/geometry.hpp"

namespace cnvs {

inline constexpr double kFrustumHalfAngleDeg = 30.0;
inline constexpr double kFieldOfViewDeg = 60.0;
inline constexpr double kTargetHeight = 1.80;
inline constexpr double kHeightTolerance = 0.05;
inline constexpr double kPlacementJitter = 0.1;

/// Focal length in pixels for the fixed field of view.
double focal_for_width(int width);

/// Camera on the 2 m sphere around the subject center, offset from the frontal direction by
/// `yaw_deg` about +y and `pitch_deg` towards +y, looking at the center.
CameraPose orbit_camera(double yaw_deg, double pitch_deg, int width, int height);

/// One frontal view, count - 5 views uniform in yaw x pitch over the frustum, then the four corners.
/// Throws ConfigError for count < 5.
std::vector<CameraPose> sample_cameras(std::uint64_t seed, int count, int width = 64, int height = 64);

/// Yaw and pitch (degrees) of a camera center relative to the frontal direction.
Eigen::Vector2d view_angles(const CameraPose& pose);

struct SyntheticScene {
  BodyParams body;                      // f64 ground truth
  std::vector<WorldCapsule> capsules;   // posed geometry
  std::vector<Eigen::Vector3d> albedo;  // per capsule
  Eigen::Vector3d light{0.0, 0.0, 1.0};
  double height = 0.0;                  // rest-pose height in meters

  /// Random identity: shape by rejection so the height is 1.80 +- 0.05 m, a natural standing
  /// pose, expression, clothing colors, and +-0.1 m horizontal/depth placement jitter.
  static SyntheticScene random(std::uint64_t seed);
  /// Scene posed from given parameters with fixed neutral colors.
  static SyntheticScene from_body(const BodyParams& body, std::uint64_t color_seed = 0);
};

struct SurfaceHit {
  double t;                // ray parameter (unit direction: meters)
  Eigen::Vector3d point;   // world
  Eigen::Vector3d normal;  // world, unit, facing outwards
  int capsule;
};

/// Nearest entering intersection of the ray with any capsule, analytic.
std::optional<SurfaceHit> intersect_scene(const SyntheticScene& scene, const Eigen::Vector3d& origin,
                                          const Eigen::Vector3d& direction);

struct GroundTruthView {
  Tensor image;   // [H x W x 3], albedo x Lambertian, black background
  Tensor points;  // [H x W x 3], hit point in camera coordinates, 0 on background
  Tensor mask;    // [H x W x 1], 1 on hits
};

GroundTruthView render_gt(const SyntheticScene& scene, const CameraPose& pose, DType dtype = DType::f32);

std::string sha256_hex(const std::vector<std::uint8_t>& bytes);
std::string sha256_file(const std::filesystem::path& path);

struct ManifestEntry {
  int identity = 0;
  int view = -1;     // -1 for per-identity assets
  std::string role;  // image | points | pose | body
  std::string path;  // relative to the manifest's directory
  std::string sha256;
};

/// Text manifest: header `identity,view,role,path,sha256`, then one line per asset.
struct Manifest {
  std::vector<ManifestEntry> entries;

  std::string format() const;
  static Manifest parse(const std::string& text);
  static Manifest read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;
  /// Number of distinct (identity, view) samples.
  int sample_count() const;
};

struct DatasetConfig {
  int identities = 8;
  int views = 16;
  int width = 64;
  int height = 64;
  std::uint64_t seed = 1;
};

/// Seed of identity `i` derived from the dataset seed.
std::uint64_t identity_seed(std::uint64_t seed, int identity);

/// Renders every identity and view into `out_dir` and writes `manifest.csv` there.
/// Throws IoError naming the path on any write failure.
Manifest make_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir);

struct ViewSample {
  int view = 0;
  CameraPose pose;
  Tensor image;
  Tensor points;
  Tensor mask;
};

struct IdentitySamples {
  int identity = 0;
  BodyParams body;
  std::vector<ViewSample> views;  // ascending view index; view 0 is frontal
};

struct Dataset {
  std::filesystem::path root;
  std::vector<IdentitySamples> identities;
  int width = 0;
  int height = 0;
};

/// Loads every asset listed in the manifest and verifies the checksums. Throws IoError on a
/// missing file or checksum mismatch.
Dataset load_dataset(const std::filesystem::path& manifest_path, DType dtype = DType::f32);

}  // namespace cnvs
