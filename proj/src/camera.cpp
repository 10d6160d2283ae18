#include "cnvs/camera.hpp"

#include <Eigen/Geometry>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

#include "cnvs/ops.hpp"

namespace cnvs {

void CameraPose::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) {
    throw ContractError("camera focal lengths must be positive");
  }
  if (width < 1 || height < 1) {
    throw ContractError("camera image size must be positive");
  }
  if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height)) {
    throw ContractError("principal point outside the image");
  }
  const Eigen::Matrix3d err = rotation * rotation.transpose() - Eigen::Matrix3d::Identity();
  if (err.cwiseAbs().maxCoeff() > 1e-5 || std::abs(rotation.determinant() - 1.0) > 1e-5) {
    throw ContractError("camera rotation is not a proper orthonormal matrix");
  }
}

Eigen::Vector3d CameraPose::direction_through(double x, double y) const {
  const Eigen::Vector3d cam((x - cx) / fx, -(y - cy) / fy, -1.0);
  return (rotation.transpose() * cam).normalized();
}

std::optional<Eigen::Vector2d> CameraPose::project_camera(const Eigen::Vector3d& cam) const {
  const double depth = -cam.z();
  if (depth <= 1e-12) {
    return std::nullopt;
  }
  return Eigen::Vector2d(cx + fx * cam.x() / depth, cy - fy * cam.y() / depth);
}

CameraPose CameraPose::look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up,
                               double focal, int width, int height) {
  const Eigen::Vector3d back = (eye - target).normalized();
  const Eigen::Vector3d right = up.cross(back).normalized();
  const Eigen::Vector3d true_up = back.cross(right);
  CameraPose pose;
  pose.rotation.row(0) = right.transpose();
  pose.rotation.row(1) = true_up.transpose();
  pose.rotation.row(2) = back.transpose();
  pose.translation = -pose.rotation * eye;
  pose.fx = pose.fy = focal;
  pose.cx = width / 2.0;
  pose.cy = height / 2.0;
  pose.width = width;
  pose.height = height;
  return pose;
}

std::string format_pose(const CameraPose& pose) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "# fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n";
  os << "size " << pose.width << ' ' << pose.height << '\n';
  os << pose.fx << ' ' << pose.fy << ' ' << pose.cx << ' ' << pose.cy;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      os << ' ' << pose.rotation(r, c);
    }
  }
  for (int i = 0; i < 3; ++i) {
    os << ' ' << pose.translation(i);
  }
  os << '\n';
  return os.str();
}

CameraPose parse_pose(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<double> values;
  int width = -1, height = -1;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) {
      line.resize(hash);
    }
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) {
      continue;
    }
    if (word == "size") {
      if (!(ls >> width >> height)) {
        throw IoError("pose record: malformed size line");
      }
      continue;
    }
    std::istringstream all(line);
    double v;
    while (all >> v) {
      values.push_back(v);
    }
    if (!all.eof()) {
      throw IoError("pose record: unparseable token in '" + line + "'");
    }
  }
  if (values.size() != 16) {
    throw IoError("pose record: expected 16 values, got " + std::to_string(values.size()));
  }
  CameraPose pose;
  pose.fx = values[0];
  pose.fy = values[1];
  pose.cx = values[2];
  pose.cy = values[3];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      pose.rotation(r, c) = values[static_cast<std::size_t>(4 + r * 3 + c)];
    }
  }
  for (int i = 0; i < 3; ++i) {
    pose.translation(i) = values[static_cast<std::size_t>(13 + i)];
  }
  pose.width = width > 0 ? width : static_cast<int>(2.0 * pose.cx);
  pose.height = height > 0 ? height : static_cast<int>(2.0 * pose.cy);
  return pose;
}

CameraPose read_pose_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open pose file " + path);
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_pose(ss.str());
}

void write_pose_file(const std::string& path, const CameraPose& pose) {
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot write pose file " + path);
  }
  out << format_pose(pose);
}

Tensor plucker_map(const CameraPose& pose, DType dtype) {
  pose.validate();
  const Eigen::Vector3d o = pose.center();
  std::vector<double> values(static_cast<std::size_t>(pose.width) * pose.height * 6);
  std::size_t k = 0;
  for (int v = 0; v < pose.height; ++v) {
    for (int u = 0; u < pose.width; ++u) {
      const Eigen::Vector3d d = pose.pixel_direction(u, v);
      const Eigen::Vector3d m = o.cross(d);
      for (int i = 0; i < 3; ++i) {
        values[k + static_cast<std::size_t>(i)] = d(i);
        values[k + 3 + static_cast<std::size_t>(i)] = m(i);
      }
      k += 6;
    }
  }
  return Tensor::from({pose.height, pose.width, 6}, values, dtype);
}

Tensor plucker_map(const CameraPose& pose) { return plucker_map(pose, default_dtype()); }

Tensor ray_directions(const CameraPose& pose, DType dtype) {
  pose.validate();
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(pose.width) * pose.height * 3);
  for (int v = 0; v < pose.height; ++v) {
    for (int u = 0; u < pose.width; ++u) {
      const Eigen::Vector3d d = pose.pixel_direction(u, v);
      values.insert(values.end(), {d.x(), d.y(), d.z()});
    }
  }
  return Tensor::from({pose.height, pose.width, 3}, values, dtype);
}

namespace {

TokenSequence project_patches(const Tensor& map, std::int64_t patch, const PatchProjection& proj, TokenRole role) {
  if (patch < 1 || map.dim(0) % patch != 0 || map.dim(1) % patch != 0) {
    throw ConfigError("tokenize: resolution " + std::to_string(map.dim(0)) + "x" + std::to_string(map.dim(1)) +
                      " not divisible by patch size " + std::to_string(patch));
  }
  Tensor patches = patchify(map, patch);
  TokenSequence seq;
  seq.tokens = add(matmul(patches, proj.weight), proj.bias);
  seq.rows = map.dim(0) / patch;
  seq.cols = map.dim(1) / patch;
  seq.patch = patch;
  seq.role = role;
  return seq;
}

}  // namespace

TokenSequence tokenize_source(const Tensor& image, const Tensor& rays, std::int64_t patch, const PatchProjection& proj) {
  if (image.rank() != 3 || image.dim(2) != 3 || rays.rank() != 3 || rays.dim(2) != 6 ||
      image.dim(0) != rays.dim(0) || image.dim(1) != rays.dim(1)) {
    throw DimensionError("tokenize_source: image " + shape_str(image.shape()) + " and rays " +
                         shape_str(rays.shape()) + " must be HxWx3 and HxWx6");
  }
  return project_patches(concat({image, rays}, 2), patch, proj, TokenRole::source);
}

TokenSequence tokenize_target(const Tensor& rays, std::int64_t patch, const PatchProjection& proj) {
  if (rays.rank() != 3 || rays.dim(2) != 6) {
    throw DimensionError("tokenize_target: rays must be HxWx6, got " + shape_str(rays.shape()));
  }
  return project_patches(rays, patch, proj, TokenRole::target);
}

Tensor grid_embedding(std::int64_t rows, std::int64_t cols, std::int64_t d, DType dtype) {
  if (d % 4 != 0 || rows < 1 || cols < 1) {
    throw DimensionError("grid_embedding: width " + std::to_string(d) + " must be divisible by 4");
  }
  const std::int64_t q = d / 4;
  std::vector<double> out(static_cast<std::size_t>(rows * cols * d));
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      double* t = &out[static_cast<std::size_t>((r * cols + c) * d)];
      for (std::int64_t k = 0; k < q; ++k) {
        const double omega = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(q));
        t[k] = std::sin(r * omega);
        t[q + k] = std::cos(r * omega);
        t[2 * q + k] = std::sin(c * omega);
        t[3 * q + k] = std::cos(c * omega);
      }
    }
  }
  return Tensor::from({rows * cols, d}, out, dtype);
}

}  // namespace cnvs
