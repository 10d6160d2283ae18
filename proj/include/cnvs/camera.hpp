#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "cnvs/tensor.hpp"

namespace cnvs {

/// Pinhole camera. `rotation` maps world to camera coordinates: x_cam = R x_world + t.
/// The camera looks down its own -z axis with +y up; image rows grow downwards and
/// pixel (u, v) has its center at (u + 0.5, v + 0.5).
struct CameraPose {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  int width = 1;
  int height = 1;

  /// Throws ContractError on non-orthonormal rotation or out-of-range intrinsics.
  void validate() const;
  Eigen::Vector3d center() const { return -rotation.transpose() * translation; }
  /// Unit world-space direction through continuous image coordinates (x, y).
  Eigen::Vector3d direction_through(double x, double y) const;
  Eigen::Vector3d pixel_direction(int u, int v) const { return direction_through(u + 0.5, v + 0.5); }
  Eigen::Vector3d to_camera(const Eigen::Vector3d& world) const { return rotation * world + translation; }
  Eigen::Vector3d to_world(const Eigen::Vector3d& cam) const { return rotation.transpose() * (cam - translation); }
  /// Continuous image coordinates of a camera-frame point; empty when not in front of the camera.
  std::optional<Eigen::Vector2d> project_camera(const Eigen::Vector3d& cam) const;
  std::optional<Eigen::Vector2d> project(const Eigen::Vector3d& world) const {
    return project_camera(to_camera(world));
  }

  /// Camera at `eye` looking at `target` with world `up`; principal point at the image center.
  static CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up,
                            double focal, int width, int height);
};

/// Structured-text pose record. One optional `size W H` line, then the 16 values
/// fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz. '#' starts a comment.
std::string format_pose(const CameraPose& pose);
CameraPose parse_pose(const std::string& text);
CameraPose read_pose_file(const std::string& path);
void write_pose_file(const std::string& path, const CameraPose& pose);

/// Per-pixel Plücker rays (d, o x d) as an [H x W x 6] tensor, computed in double precision.
Tensor plucker_map(const CameraPose& pose, DType dtype);
Tensor plucker_map(const CameraPose& pose);

/// Unit world ray direction per pixel, [H x W x 3].
Tensor ray_directions(const CameraPose& pose, DType dtype);

enum class TokenRole { source, target };

struct TokenSequence {
  Tensor tokens;  // [rows*cols x d]
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::int64_t patch = 0;
  TokenRole role = TokenRole::source;
  std::int64_t length() const { return rows * cols; }
};

/// Linear map applied to each flattened patch: tokens = patches * weight + bias.
struct PatchProjection {
  Tensor weight;  // [in x d]
  Tensor bias;    // [d]
};

/// Source tokens from the 9-channel concatenation [image, rays].
TokenSequence tokenize_source(const Tensor& image, const Tensor& rays, std::int64_t patch, const PatchProjection& proj);
/// Target query tokens from the 6-channel ray map alone.
TokenSequence tokenize_target(const Tensor& rays, std::int64_t patch, const PatchProjection& proj);

/// Fixed 2-D sine-cosine code of each patch's grid cell, [rows*cols x d] in token order.
/// The first d/2 channels encode the row, the rest the column; each half is d/4 sines then
/// d/4 cosines at frequencies 10000^(-k/(d/4)). Requires d divisible by 4.
Tensor grid_embedding(std::int64_t rows, std::int64_t cols, std::int64_t d, DType dtype);

}  // namespace cnvs
