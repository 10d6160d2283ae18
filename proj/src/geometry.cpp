#include "cnvs/geometry.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cnvs/ops.hpp"

namespace cnvs {

using detail::attach;
using detail::make_node;

// ---------------------------------------------------------------------------
// Body parameters

BodyParams BodyParams::zeros(DType dtype) {
  return {Tensor::zeros({kShapeDims}, dtype), Tensor::zeros({kPoseDims}, dtype), Tensor::zeros({kExprDims}, dtype),
          Tensor::zeros({kCamDims}, dtype)};
}

BodyParams BodyParams::rest(DType dtype) {
  BodyParams p = zeros(dtype);
  p.cam = Tensor::from({kCamDims}, {1.0, 0.0, 0.0}, dtype);
  return p;
}

BodyParams BodyParams::detach() const { return {beta.detach(), theta.detach(), psi.detach(), cam.detach()}; }

void BodyParams::validate() const {
  if (beta.shape() != Shape{kShapeDims} || theta.shape() != Shape{kPoseDims} || psi.shape() != Shape{kExprDims} ||
      cam.shape() != Shape{kCamDims}) {
    throw DimensionError("body parameters must have dims (10, 48, 10, 3), got " + shape_str(beta.shape()) + " " +
                         shape_str(theta.shape()) + " " + shape_str(psi.shape()) + " " + shape_str(cam.shape()));
  }
  for (double t : theta.to_vector()) {
    if (!(std::abs(t) <= std::numbers::pi + 1e-9)) {
      throw ContractError("pose angle outside [-pi, pi]: " + std::to_string(t));
    }
  }
  if (!(cam.at(0) > 0)) {
    throw ContractError("camera scale must be positive");
  }
}

namespace {

constexpr double kMaxDepthOffset = 0.5;

}  // namespace

Eigen::Vector3d placement_from_cam(double scale, double tx, double ty) {
  const double dz = std::clamp(kCameraRadius - kCameraRadius / scale, -kMaxDepthOffset, kMaxDepthOffset);
  return {tx, ty, dz};
}

Eigen::Vector3d cam_from_placement(const Eigen::Vector3d& t) {
  return {kCameraRadius / (kCameraRadius - t.z()), t.x(), t.y()};
}

std::string format_body_params(const BodyParams& p) {
  std::ostringstream os;
  os.precision(17);
  auto line = [&](const char* key, const Tensor& t) {
    os << key;
    for (double v : t.to_vector()) {
      os << ' ' << v;
    }
    os << '\n';
  };
  line("beta", p.beta);
  line("theta", p.theta);
  line("psi", p.psi);
  line("cam", p.cam);
  return os.str();
}

BodyParams parse_body_params(const std::string& text, DType dtype) {
  std::istringstream in(text);
  std::string line;
  BodyParams p;
  auto field = [&](const std::string& key, std::vector<double> values) -> Tensor* {
    const std::pair<const char*, std::pair<Tensor*, int>> table[] = {{"beta", {&p.beta, kShapeDims}},
                                                                     {"theta", {&p.theta, kPoseDims}},
                                                                     {"psi", {&p.psi, kExprDims}},
                                                                     {"cam", {&p.cam, kCamDims}}};
    for (const auto& [name, slot] : table) {
      if (key == name) {
        if (static_cast<int>(values.size()) != slot.second) {
          throw IoError("body record: '" + key + "' expects " + std::to_string(slot.second) + " values, got " +
                        std::to_string(values.size()));
        }
        *slot.first = Tensor::from({slot.second}, values, dtype);
        return slot.first;
      }
    }
    throw IoError("body record: unknown field '" + key + "'");
  };
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) {
      line.erase(hash);
    }
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) {
      continue;
    }
    std::vector<double> values;
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(tok, &used));
        if (used != tok.size()) {
          throw std::invalid_argument(tok);
        }
      } catch (const std::exception&) {
        throw IoError("body record: bad number '" + tok + "'");
      }
    }
    field(key, std::move(values));
  }
  if (!p.beta.defined() || !p.theta.defined() || !p.psi.defined() || !p.cam.defined()) {
    throw IoError("body record: missing fields");
  }
  return p;
}

BodyParams read_body_params(const std::string& path, DType dtype) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open " + path);
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_body_params(ss.str(), dtype);
}

void write_body_params(const std::string& path, const BodyParams& params) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw IoError("cannot write " + path);
  }
  out << format_body_params(params);
  if (!out) {
    throw IoError("write failed for " + path);
  }
}

// ---------------------------------------------------------------------------
// Skeleton

namespace {

void add_capsule_template(ProxySkeleton& s, int c) {
  const Capsule& cap = s.capsules[static_cast<std::size_t>(c)];
  const Eigen::Vector3d seg = cap.end - cap.start;
  const double len = seg.norm();
  const Eigen::Vector3d u = seg / len;
  const Eigen::Vector3d helper = std::abs(u.z()) < 0.9 ? Eigen::Vector3d::UnitZ() : Eigen::Vector3d::UnitX();
  const Eigen::Vector3d e1 = helper.cross(u).normalized();
  const Eigen::Vector3d e2 = u.cross(e1);
  constexpr int kSegments = 12;
  const int rings = std::max(2, static_cast<int>(std::ceil(len / 0.035)) + 1);
  auto around = [&](int k) {
    const double phi = 2 * std::numbers::pi * k / kSegments;
    return Eigen::Vector3d(std::cos(phi) * e1 + std::sin(phi) * e2);
  };
  auto push = [&](const Eigen::Vector3d& axis, const Eigen::Vector3d& radial) {
    if (cap.region == BodyRegion::head) {
      s.head_vertices.push_back(static_cast<int>(s.vertices.size()));
    }
    s.vertices.push_back({c, axis, radial});
  };
  // Start cap (pole, then latitudes), cylinder rings, end cap.
  push(Eigen::Vector3d::Zero(), -u);
  for (double eta : {60.0, 30.0}) {
    const double r = eta * std::numbers::pi / 180;
    for (int k = 0; k < kSegments; ++k) {
      push(Eigen::Vector3d::Zero(), std::cos(r) * around(k) - std::sin(r) * u);
    }
  }
  for (int i = 0; i < rings; ++i) {
    const double t = static_cast<double>(i) / (rings - 1);
    for (int k = 0; k < kSegments; ++k) {
      push(t * u, around(k));
    }
  }
  for (double eta : {30.0, 60.0}) {
    const double r = eta * std::numbers::pi / 180;
    for (int k = 0; k < kSegments; ++k) {
      push(u, std::cos(r) * around(k) + std::sin(r) * u);
    }
  }
  push(u, u);
}

ProxySkeleton build_standard() {
  ProxySkeleton s;
  struct J {
    const char* name;
    int parent;
    Eigen::Vector3d rest;
    int length_beta;
  };
  const J joints[] = {
      {"pelvis", -1, {0, 0.95, 0}, -1},         {"spine", 0, {0, 1.15, 0}, 0},
      {"neck", 1, {0, 1.48, 0}, 0},             {"head", 2, {0, 1.58, 0}, 1},
      {"l_shoulder", 1, {0.17, 1.43, 0}, 0},    {"l_elbow", 4, {0.22, 1.15, 0}, 2},
      {"l_wrist", 5, {0.25, 0.90, 0.02}, 3},    {"r_shoulder", 1, {-0.17, 1.43, 0}, 0},
      {"r_elbow", 7, {-0.22, 1.15, 0}, 2},      {"r_wrist", 8, {-0.25, 0.90, 0.02}, 3},
      {"l_hip", 0, {0.10, 0.90, 0}, -1},        {"l_knee", 10, {0.11, 0.50, 0.01}, 4},
      {"l_ankle", 11, {0.11, 0.09, 0}, 5},      {"r_hip", 0, {-0.10, 0.90, 0}, -1},
      {"r_knee", 13, {-0.11, 0.50, 0.01}, 4},   {"r_ankle", 14, {-0.11, 0.09, 0}, 5},
  };
  for (const auto& j : joints) {
    s.names.emplace_back(j.name);
    s.parents.push_back(j.parent);
    s.offsets.push_back(j.parent < 0 ? j.rest : Eigen::Vector3d(j.rest - joints[j.parent].rest));
    s.length_beta.push_back(j.length_beta);
  }
  auto tip = [&](const char* name, int joint, int child, double radius, int radius_beta, BodyRegion region) {
    s.capsules.push_back({name, joint, Eigen::Vector3d::Zero(), s.offsets[static_cast<std::size_t>(child)],
                          s.length_beta[static_cast<std::size_t>(child)], radius, radius_beta, region});
  };
  s.capsules.push_back({"hips", 0, {-0.09, -0.05, 0}, {0.09, -0.05, 0}, -1, 0.11, 6, BodyRegion::torso});
  tip("abdomen", 0, 1, 0.12, 6, BodyRegion::torso);
  tip("chest", 1, 2, 0.14, 6, BodyRegion::torso);
  tip("neck", 2, 3, 0.05, 9, BodyRegion::torso);
  s.capsules.push_back({"head", 3, {0, 0.03, 0}, {0, 0.11, 0}, 1, 0.10, 9, BodyRegion::head});
  tip("l_upper_arm", 4, 5, 0.05, 7, BodyRegion::arm);
  tip("l_forearm", 5, 6, 0.04, 7, BodyRegion::arm);
  tip("r_upper_arm", 7, 8, 0.05, 7, BodyRegion::arm);
  tip("r_forearm", 8, 9, 0.04, 7, BodyRegion::arm);
  tip("l_thigh", 10, 11, 0.075, 8, BodyRegion::leg);
  tip("l_shin", 11, 12, 0.055, 8, BodyRegion::leg);
  tip("r_thigh", 13, 14, 0.075, 8, BodyRegion::leg);
  tip("r_shin", 14, 15, 0.055, 8, BodyRegion::leg);
  s.capsules.push_back({"l_foot", 12, {0, -0.03, -0.02}, {0, -0.045, 0.13}, -1, 0.04, 8, BodyRegion::foot});
  s.capsules.push_back({"r_foot", 15, {0, -0.03, -0.02}, {0, -0.045, 0.13}, -1, 0.04, 8, BodyRegion::foot});
  for (int c = 0; c < static_cast<int>(s.capsules.size()); ++c) {
    add_capsule_template(s, c);
  }
  // Fixed pseudo-random expression directions, 4 mm per unit coefficient.
  Rng rng(20240611);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (std::size_t v = 0; v < s.head_vertices.size() * kExprDims; ++v) {
    s.expression_basis.emplace_back(0.004 * n01(rng), 0.004 * n01(rng), 0.004 * n01(rng));
  }
  s.validate();
  return s;
}

}  // namespace

const ProxySkeleton& ProxySkeleton::standard() {
  static const ProxySkeleton s = build_standard();
  return s;
}

void ProxySkeleton::validate() const {
  int roots = 0;
  for (int j = 0; j < joint_count(); ++j) {
    const int p = parents[static_cast<std::size_t>(j)];
    if (p < 0) {
      ++roots;
    } else if (p >= j) {
      throw ContractError("skeleton joints must follow their parents (joint " + std::to_string(j) + ")");
    }
  }
  if (roots != 1 || parents.empty() || parents[0] != -1) {
    throw ContractError("skeleton must have exactly one root at index 0");
  }
  if (offsets.size() != parents.size() || length_beta.size() != parents.size()) {
    throw ContractError("skeleton tables disagree in length");
  }
}

std::vector<int> ProxySkeleton::subtree(int j) const {
  std::vector<int> out{j};
  for (int k = j + 1; k < joint_count(); ++k) {
    if (std::find(out.begin(), out.end(), parents[static_cast<std::size_t>(k)]) != out.end()) {
      out.push_back(k);
    }
  }
  return out;
}

namespace {

Eigen::Matrix3d euler_matrix(double a, double b, double c) {
  return (Eigen::AngleAxisd(c, Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(b, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(a, Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

double factor(const std::vector<double>& beta, int k) { return k < 0 ? 1.0 : 1.0 + 0.1 * beta[static_cast<std::size_t>(k)]; }

}  // namespace

Posed pose_skeleton(const BodyParams& params, const ProxySkeleton& s) {
  const auto beta = params.beta.to_vector(), theta = params.theta.to_vector(), cam = params.cam.to_vector();
  Posed out;
  const auto n = static_cast<std::size_t>(s.joint_count());
  out.rotations.resize(n);
  out.positions.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const Eigen::Matrix3d local = euler_matrix(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]);
    const int p = s.parents[j];
    if (p < 0) {
      out.rotations[j] = local;
      out.positions[j] = s.offsets[j] + placement_from_cam(cam[0], cam[1], cam[2]);
    } else {
      const auto up = static_cast<std::size_t>(p);
      out.rotations[j] = out.rotations[up] * local;
      out.positions[j] = out.positions[up] + out.rotations[up] * (s.offsets[j] * factor(beta, s.length_beta[j]));
    }
  }
  for (int c = 0; c < static_cast<int>(s.capsules.size()); ++c) {
    const Capsule& cap = s.capsules[static_cast<std::size_t>(c)];
    const auto j = static_cast<std::size_t>(cap.joint);
    const Eigen::Vector3d end = cap.start + (cap.end - cap.start) * factor(beta, cap.length_beta);
    out.capsules.push_back({out.positions[j] + out.rotations[j] * cap.start, out.positions[j] + out.rotations[j] * end,
                            cap.radius * factor(beta, cap.radius_beta), c, cap.region, out.rotations[j]});
  }
  return out;
}

double rest_height(const BodyParams& params, const ProxySkeleton& s) {
  BodyParams rest = BodyParams::rest(DType::f64);
  rest.beta = params.beta;
  const Posed posed = pose_skeleton(rest, s);
  double lo = 1e9, hi = -1e9;
  for (const auto& c : posed.capsules) {
    lo = std::min({lo, c.a.y() - c.radius, c.b.y() - c.radius});
    hi = std::max({hi, c.a.y() + c.radius, c.b.y() + c.radius});
  }
  return hi - lo;
}

// ---------------------------------------------------------------------------
// Differentiable kinematics

Tensor euler_to_rotmat(const Tensor& angles) {
  if (angles.shape() != Shape{3}) {
    throw DimensionError("euler_to_rotmat expects [3] angles, got " + shape_str(angles.shape()));
  }
  const auto th = angles.to_vector();
  const Eigen::Matrix3d r = euler_matrix(th[0], th[1], th[2]);
  auto out = make_node({3, 3}, angles.dtype(), "euler_to_rotmat");
  dispatch(angles.dtype(), [&]<class T>() {
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        out->values<T>()[static_cast<std::size_t>(i * 3 + j)] = static_cast<T>(r(i, j));
      }
    }
  });
  if (detail::needs_grad({&angles})) {
    auto an = angles.node_ptr();
    attach(out, {an}, [an, th](Node& self) {
      const double a = th[0], b = th[1], c = th[2];
      const Eigen::Matrix3d rx = Eigen::AngleAxisd(a, Eigen::Vector3d::UnitX()).toRotationMatrix();
      const Eigen::Matrix3d ry = Eigen::AngleAxisd(b, Eigen::Vector3d::UnitY()).toRotationMatrix();
      const Eigen::Matrix3d rz = Eigen::AngleAxisd(c, Eigen::Vector3d::UnitZ()).toRotationMatrix();
      Eigen::Matrix3d drx, dry, drz;
      drx << 0, 0, 0, 0, -std::sin(a), -std::cos(a), 0, std::cos(a), -std::sin(a);
      dry << -std::sin(b), 0, std::cos(b), 0, 0, 0, -std::cos(b), 0, -std::sin(b);
      drz << -std::sin(c), -std::cos(c), 0, std::cos(c), -std::sin(c), 0, 0, 0, 0;
      const Eigen::Matrix3d parts[3] = {rz * ry * drx, rz * dry * rx, drz * ry * rx};
      dispatch(self.dtype, [&]<class T>() {
        const T* g = self.grads<T>().data();
        auto dst = an->grad_buffer<T>();
        for (int k = 0; k < 3; ++k) {
          double acc = 0;
          for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
              acc += g[i * 3 + j] * parts[k](i, j);
            }
          }
          dst[static_cast<std::size_t>(k)] += static_cast<T>(acc);
        }
      });
    });
  }
  return Tensor(out);
}

namespace {

Tensor vec3(const Eigen::Vector3d& v, DType dt) { return Tensor::from({3}, {v.x(), v.y(), v.z()}, dt); }

Tensor column(const Tensor& v) { return reshape(v, {3, 1}); }

}  // namespace

Tensor proxy_forward(const BodyParams& params, const ProxySkeleton& s) {
  params.validate();
  const DType dt = params.beta.dtype();
  const Tensor factors = add_scalar(scale(params.beta, 0.1), 1.0);
  auto factor_of = [&](int k) { return slice(factors, 0, k, k + 1); };

  // Root placement (tx, ty, clamp(2 - 2/s)).
  const Tensor s_cam = slice(params.cam, 0, 0, 1);
  const Tensor dz = clamp(add_scalar(scale(div(Tensor::full({1}, 1.0, dt), s_cam), -kCameraRadius), kCameraRadius),
                          -kMaxDepthOffset, kMaxDepthOffset);
  const Tensor placement = concat({slice(params.cam, 0, 1, 3), dz}, 0);

  const auto n = static_cast<std::size_t>(s.joint_count());
  std::vector<Tensor> rot(n), pos(n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto jj = static_cast<std::int64_t>(j);
    const Tensor local = euler_to_rotmat(slice(params.theta, 0, 3 * jj, 3 * jj + 3));
    const int p = s.parents[j];
    if (p < 0) {
      rot[j] = local;
      pos[j] = add(placement, vec3(s.offsets[j], dt));
      continue;
    }
    const auto up = static_cast<std::size_t>(p);
    rot[j] = matmul(rot[up], local);
    Tensor off = vec3(s.offsets[j], dt);
    if (s.length_beta[j] >= 0) {
      off = mul(off, factor_of(s.length_beta[j]));
    }
    pos[j] = add(pos[up], reshape(matmul(rot[up], column(off)), {3}));
  }

  std::vector<Tensor> parts;
  std::size_t first = 0;
  std::size_t head_seen = 0;
  for (int c = 0; c < static_cast<int>(s.capsules.size()); ++c) {
    const Capsule& cap = s.capsules[static_cast<std::size_t>(c)];
    std::size_t last = first;
    while (last < s.vertices.size() && s.vertices[last].capsule == c) {
      ++last;
    }
    const auto count = static_cast<std::int64_t>(last - first);
    const double len0 = (cap.end - cap.start).norm();
    std::vector<double> base, along, radial;
    for (std::size_t v = first; v < last; ++v) {
      for (int a = 0; a < 3; ++a) {
        base.push_back(cap.start[a]);
        along.push_back(s.vertices[v].axis_coef[a] * len0);
        radial.push_back(s.vertices[v].radial_coef[a] * cap.radius);
      }
    }
    Tensor along_t = Tensor::from({count, 3}, along, dt);
    Tensor radial_t = Tensor::from({count, 3}, radial, dt);
    if (cap.length_beta >= 0) {
      along_t = mul(along_t, factor_of(cap.length_beta));
    }
    if (cap.radius_beta >= 0) {
      radial_t = mul(radial_t, factor_of(cap.radius_beta));
    }
    Tensor local = add(add(Tensor::from({count, 3}, base, dt), along_t), radial_t);
    if (cap.region == BodyRegion::head) {
      std::vector<double> basis(static_cast<std::size_t>(count) * 3 * kExprDims);
      for (std::int64_t v = 0; v < count; ++v) {
        for (int k = 0; k < kExprDims; ++k) {
          const auto& e = s.expression_basis[(head_seen + static_cast<std::size_t>(v)) * kExprDims + k];
          for (int a = 0; a < 3; ++a) {
            basis[static_cast<std::size_t>((v * 3 + a) * kExprDims + k)] = e[a];
          }
        }
      }
      head_seen += static_cast<std::size_t>(count);
      const Tensor disp = matmul(Tensor::from({count * 3, kExprDims}, basis, dt), reshape(params.psi, {kExprDims, 1}));
      local = add(local, reshape(disp, {count, 3}));
    }
    const auto j = static_cast<std::size_t>(cap.joint);
    parts.push_back(add(matmul(local, transpose(rot[j])), pos[j]));
    first = last;
  }
  return concat(parts, 0);
}

// ---------------------------------------------------------------------------
// Position map

PositionMap render_position_map(const Tensor& vertices, const CameraPose& pose) {
  pose.validate();
  if (vertices.rank() != 2 || vertices.dim(1) != 3) {
    throw DimensionError("render_position_map expects [V x 3] vertices, got " + shape_str(vertices.shape()));
  }
  const int W = pose.width, H = pose.height;
  const auto nv = vertices.dim(0);
  const auto xyz = vertices.to_vector();
  struct Hit {
    std::int32_t vertex;
    double weight;  // tapered kernel
    double gauss;   // untapered kernel, whose derivative the taper shares
    double depth;
  };
  std::vector<std::vector<Hit>> cells(static_cast<std::size_t>(W) * H);
  const double r = kPointSplatCutoff * kPointSplatSigma;
  // The kernel is lowered to reach zero at the cutoff so vertices enter and leave a pixel continuously.
  const double floor_weight = std::exp(-0.5 * kPointSplatCutoff * kPointSplatCutoff);
  for (std::int64_t v = 0; v < nv; ++v) {
    const Eigen::Vector3d cam = pose.to_camera({xyz[v * 3], xyz[v * 3 + 1], xyz[v * 3 + 2]});
    const auto px = pose.project_camera(cam);
    if (!px) {
      continue;
    }
    const double x = px->x(), y = px->y(), depth = -cam.z();
    const int u0 = std::max(0, static_cast<int>(std::floor(x - r - 0.5)));
    const int u1 = std::min(W - 1, static_cast<int>(std::ceil(x + r - 0.5)));
    const int v0 = std::max(0, static_cast<int>(std::floor(y - r - 0.5)));
    const int v1 = std::min(H - 1, static_cast<int>(std::ceil(y + r - 0.5)));
    for (int pv = v0; pv <= v1; ++pv) {
      for (int pu = u0; pu <= u1; ++pu) {
        const double dx = pu + 0.5 - x, dy = pv + 0.5 - y;
        const double d2 = dx * dx + dy * dy;
        if (d2 < r * r) {
          const double g = std::exp(-d2 / (2 * kPointSplatSigma * kPointSplatSigma));
          cells[static_cast<std::size_t>(pv) * W + pu].push_back({static_cast<std::int32_t>(v), g - floor_weight, g, depth});
        }
      }
    }
  }
  // Normalize each pixel's weights after the nearest-depth falloff.
  auto offsets = std::make_shared<std::vector<std::int64_t>>(1, 0);
  auto ids = std::make_shared<std::vector<std::int32_t>>();
  auto weights = std::make_shared<std::vector<double>>();
  auto gauss = std::make_shared<std::vector<double>>();
  std::vector<double> mask(static_cast<std::size_t>(W) * H, 0.0);
  for (std::size_t p = 0; p < cells.size(); ++p) {
    auto& cell = cells[p];
    if (!cell.empty()) {
      double zmin = cell[0].depth;
      for (const auto& h : cell) {
        zmin = std::min(zmin, h.depth);
      }
      double total = 0;
      for (auto& h : cell) {
        const double falloff = std::exp(-(h.depth - zmin) / kPointSplatDepthTau);
        h.weight *= falloff;
        h.gauss *= falloff;
        total += h.weight;
      }
      for (const auto& h : cell) {
        ids->push_back(h.vertex);
        weights->push_back(h.weight / total);
        gauss->push_back(h.gauss / total);
      }
      mask[p] = 1.0;
    }
    offsets->push_back(static_cast<std::int64_t>(ids->size()));
  }
  const DType dt = vertices.dtype();
  auto out = make_node({H, W, 3}, dt, "render_position_map");
  dispatch(dt, [&]<class T>() {
    const T* src = vertices.data<T>().data();
    T* o = out->values<T>().data();
    for (std::size_t p = 0; p + 1 < offsets->size(); ++p) {
      double acc[3] = {0, 0, 0};
      for (auto k = (*offsets)[p]; k < (*offsets)[p + 1]; ++k) {
        const auto v = static_cast<std::size_t>((*ids)[static_cast<std::size_t>(k)]);
        for (int a = 0; a < 3; ++a) {
          acc[a] += (*weights)[static_cast<std::size_t>(k)] * src[v * 3 + a];
        }
      }
      for (int a = 0; a < 3; ++a) {
        o[p * 3 + a] = static_cast<T>(acc[a]);
      }
    }
  });
  if (detail::needs_grad({&vertices})) {
    auto vn = vertices.node_ptr();
    // pos_p = sum_v w_v x_v / sum_v w_v with w_v = (G(r_v) - G(cutoff)) exp(-(z_v - z_min) / tau), so
    // d pos_p / d w_v = (x_v - pos_p) / sum w. dG/dr carries the untapered G; the z_min shift cancels.
    attach(out, {vn}, [vn, offsets, ids, weights, gauss, pose, xyz](Node& self) {
      dispatch(self.dtype, [&]<class T>() {
        const T* g = self.grads<T>().data();
        const T* pos = self.values<T>().data();
        const std::size_t nv = xyz.size() / 3;
        std::vector<double> dsx(nv, 0.0), dsy(nv, 0.0), ddepth(nv, 0.0), direct(xyz.size(), 0.0);
        std::vector<Eigen::Vector3d> cams(nv);
        std::vector<Eigen::Vector2d> screen(nv);
        for (std::size_t v = 0; v < nv; ++v) {
          cams[v] = pose.to_camera({xyz[v * 3], xyz[v * 3 + 1], xyz[v * 3 + 2]});
          if (auto px = pose.project_camera(cams[v])) {
            screen[v] = *px;
          }
        }
        const auto width = static_cast<std::size_t>(pose.width);
        const double inv_s2 = 1.0 / (kPointSplatSigma * kPointSplatSigma);
        for (std::size_t p = 0; p + 1 < offsets->size(); ++p) {
          const double px = static_cast<double>(p % width) + 0.5, py = static_cast<double>(p / width) + 0.5;
          for (auto k = (*offsets)[p]; k < (*offsets)[p + 1]; ++k) {
            const auto v = static_cast<std::size_t>((*ids)[static_cast<std::size_t>(k)]);
            const double w = (*weights)[static_cast<std::size_t>(k)];
            const double wg = (*gauss)[static_cast<std::size_t>(k)];
            double dw = 0;
            for (std::size_t a = 0; a < 3; ++a) {
              direct[v * 3 + a] += w * g[p * 3 + a];
              dw += g[p * 3 + a] * (xyz[v * 3 + a] - pos[p * 3 + a]);
            }
            dsx[v] += dw * wg * (px - screen[v].x()) * inv_s2;
            dsy[v] += dw * wg * (py - screen[v].y()) * inv_s2;
            ddepth[v] -= dw * w / kPointSplatDepthTau;
          }
        }
        auto dst = vn->grad_buffer<T>();
        for (std::size_t v = 0; v < nv; ++v) {
          const double z = -cams[v].z();
          if (z <= 1e-12) {
            continue;
          }
          // x = cx + fx X / z, y = cy - fy Y / z, z = -Z.
          const double dz = ddepth[v] + dsx[v] * (-pose.fx * cams[v].x() / (z * z)) +
                            dsy[v] * (pose.fy * cams[v].y() / (z * z));
          const Eigen::Vector3d dcam(dsx[v] * pose.fx / z, -dsy[v] * pose.fy / z, -dz);
          const Eigen::Vector3d dw = pose.rotation.transpose() * dcam;
          for (int a = 0; a < 3; ++a) {
            dst[v * 3 + static_cast<std::size_t>(a)] += static_cast<T>(direct[v * 3 + static_cast<std::size_t>(a)] + dw[a]);
          }
        }
      });
    });
  }
  return {Tensor(out), Tensor::from({H, W, 1}, mask, dt)};
}

// ---------------------------------------------------------------------------
// Triplane

TriplaneParams TriplaneParams::init(std::int64_t resolution, std::int64_t channels, Rng& rng, DType dtype) {
  if (resolution < 2 || channels < 1) {
    throw ConfigError("triplane needs resolution >= 2 and at least one channel");
  }
  return {param(normal_tensor({resolution, resolution, channels}, 0.1, rng, dtype)),
          param(normal_tensor({resolution, resolution, channels}, 0.1, rng, dtype)),
          param(normal_tensor({resolution, resolution, channels}, 0.1, rng, dtype))};
}

namespace {

struct PlaneCoord {
  double g;      // continuous node index
  bool inside;   // false when clamped (zero coordinate gradient)
};

PlaneCoord plane_coord(double x, int axis, std::int64_t res) {
  const double t = (x - kTriplaneLo[axis]) / (kTriplaneHi[axis] - kTriplaneLo[axis]);
  const bool inside = t > 0.0 && t < 1.0;
  return {std::clamp(t, 0.0, 1.0) * static_cast<double>(res - 1), inside};
}

// Bilinear cell for a continuous node index: base node and fraction.
std::pair<std::int64_t, double> cell(double g, std::int64_t res) {
  auto i = static_cast<std::int64_t>(std::floor(g));
  i = std::clamp<std::int64_t>(i, 0, res - 2);
  return {i, g - static_cast<double>(i)};
}

}  // namespace

Tensor triplane_sample(const TriplaneParams& planes, const Tensor& points) {
  if (points.rank() != 2 || points.dim(1) != 3) {
    throw DimensionError("triplane_sample expects [P x 3] points, got " + shape_str(points.shape()));
  }
  const auto res = planes.resolution(), ch = planes.channels();
  for (const Tensor* t : {&planes.xy, &planes.xz, &planes.yz}) {
    if (t->shape() != Shape{res, res, ch}) {
      throw DimensionError("triplane planes must share one [R x R x C] shape");
    }
  }
  const DType dt = detail::common_dtype("triplane_sample", {&planes.xy, &planes.xz, &planes.yz, &points});
  const auto np = points.dim(0);
  auto out = make_node({np, ch}, dt, "triplane_sample");
  // (row axis, column axis) per plane.
  static constexpr int kAxes[3][2] = {{1, 0}, {2, 0}, {2, 1}};
  const Tensor* plane_list[3] = {&planes.xy, &planes.xz, &planes.yz};
  dispatch(dt, [&]<class T>() {
    const T* pts = points.data<T>().data();
    T* o = out->values<T>().data();
    for (std::int64_t i = 0; i < np; ++i) {
      for (int q = 0; q < 3; ++q) {
        const T* pl = plane_list[q]->data<T>().data();
        const auto [r0, fr] = cell(plane_coord(pts[i * 3 + kAxes[q][0]], kAxes[q][0], res).g, res);
        const auto [c0, fc] = cell(plane_coord(pts[i * 3 + kAxes[q][1]], kAxes[q][1], res).g, res);
        const T w00 = static_cast<T>((1 - fr) * (1 - fc)), w01 = static_cast<T>((1 - fr) * fc),
                w10 = static_cast<T>(fr * (1 - fc)), w11 = static_cast<T>(fr * fc);
        const T* n00 = pl + (r0 * res + c0) * ch;
        const T* n01 = n00 + ch;
        const T* n10 = n00 + res * ch;
        const T* n11 = n10 + ch;
        for (std::int64_t c = 0; c < ch; ++c) {
          o[i * ch + c] += w00 * n00[c] + w01 * n01[c] + w10 * n10[c] + w11 * n11[c];
        }
      }
    }
  });
  if (detail::needs_grad({&planes.xy, &planes.xz, &planes.yz, &points})) {
    std::shared_ptr<Node> pn[3] = {planes.xy.node_ptr(), planes.xz.node_ptr(), planes.yz.node_ptr()};
    auto ptn = points.node_ptr();
    attach(out, {pn[0], pn[1], pn[2], ptn}, [pn0 = pn[0], pn1 = pn[1], pn2 = pn[2], ptn, res, ch, np](Node& self) {
      const std::shared_ptr<Node> pl[3] = {pn0, pn1, pn2};
      dispatch(self.dtype, [&]<class T>() {
        const T* g = self.grads<T>().data();
        const T* pts = ptn->values<T>().data();
        for (int q = 0; q < 3; ++q) {
          const int ra = kAxes[q][0], ca = kAxes[q][1];
          const T* vals = pl[q]->values<T>().data();
          T* gp = pl[q]->requires_grad ? pl[q]->grad_buffer<T>().data() : nullptr;
          T* gx = ptn->requires_grad ? ptn->grad_buffer<T>().data() : nullptr;
          const double row_scale = static_cast<double>(res - 1) / (kTriplaneHi[ra] - kTriplaneLo[ra]);
          const double col_scale = static_cast<double>(res - 1) / (kTriplaneHi[ca] - kTriplaneLo[ca]);
          for (std::int64_t i = 0; i < np; ++i) {
            const PlaneCoord rc = plane_coord(pts[i * 3 + ra], ra, res);
            const PlaneCoord cc = plane_coord(pts[i * 3 + ca], ca, res);
            const auto [r0, fr] = cell(rc.g, res);
            const auto [c0, fc] = cell(cc.g, res);
            const std::int64_t b00 = (r0 * res + c0) * ch, b01 = b00 + ch, b10 = b00 + res * ch, b11 = b10 + ch;
            const T* gi = g + i * ch;
            if (gp) {
              const T w00 = static_cast<T>((1 - fr) * (1 - fc)), w01 = static_cast<T>((1 - fr) * fc),
                      w10 = static_cast<T>(fr * (1 - fc)), w11 = static_cast<T>(fr * fc);
              for (std::int64_t c = 0; c < ch; ++c) {
                gp[b00 + c] += w00 * gi[c];
                gp[b01 + c] += w01 * gi[c];
                gp[b10 + c] += w10 * gi[c];
                gp[b11 + c] += w11 * gi[c];
              }
            }
            if (gx) {
              double drow = 0, dcol = 0;
              for (std::int64_t c = 0; c < ch; ++c) {
                const double v00 = vals[b00 + c], v01 = vals[b01 + c], v10 = vals[b10 + c], v11 = vals[b11 + c];
                drow += gi[c] * ((1 - fc) * (v10 - v00) + fc * (v11 - v01));
                dcol += gi[c] * ((1 - fr) * (v01 - v00) + fr * (v11 - v10));
              }
              if (rc.inside) {
                gx[i * 3 + ra] += static_cast<T>(drow * row_scale);
              }
              if (cc.inside) {
                gx[i * 3 + ca] += static_cast<T>(dcol * col_scale);
              }
            }
          }
        }
      });
    });
  }
  return Tensor(out);
}

Tensor triplane_query(const Tensor& positions, const Tensor& mask, const TriplaneParams& planes, std::int64_t pool) {
  if (positions.rank() != 3 || positions.dim(2) != 3 || mask.shape() != Shape{positions.dim(0), positions.dim(1), 1}) {
    throw DimensionError("triplane_query: positions " + shape_str(positions.shape()) + ", mask " +
                         shape_str(mask.shape()));
  }
  const auto h = positions.dim(0), w = positions.dim(1), ch = planes.channels();
  const Tensor feats = reshape(triplane_sample(planes, reshape(positions, {h * w, 3})), {h, w, ch});
  const auto m = mask.to_vector();
  std::vector<double> wide(static_cast<std::size_t>(h * w * ch));
  for (std::int64_t p = 0; p < h * w; ++p) {
    std::fill_n(wide.begin() + p * ch, ch, m[static_cast<std::size_t>(p)]);
  }
  return avg_pool2d(mul(feats, Tensor::from({h, w, ch}, wide, feats.dtype())), pool);
}

// ---------------------------------------------------------------------------
// Adapters and heads

AdapterParams AdapterParams::init(std::int64_t in, std::int64_t channels, Rng& rng, DType dtype) {
  return {param(normal_tensor({3, 3, in, channels}, 1.0 / std::sqrt(9.0 * static_cast<double>(in)), rng, dtype)),
          param(Tensor::zeros({channels}, dtype)),
          param(normal_tensor({3, 3, channels, channels}, 1.0 / std::sqrt(9.0 * static_cast<double>(channels)), rng,
                              dtype)),
          param(Tensor::zeros({channels}, dtype))};
}

void AdapterParams::append_named(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".conv1.weight", w1);
  out.emplace_back(prefix + ".conv1.bias", b1);
  out.emplace_back(prefix + ".conv2.weight", w2);
  out.emplace_back(prefix + ".conv2.bias", b2);
}

std::vector<Tensor*> AdapterParams::tensors() { return {&w1, &b1, &w2, &b2}; }

Tensor adapter_forward(const Tensor& tokens, std::int64_t rows, std::int64_t cols, const AdapterParams& p) {
  if (tokens.rank() != 2 || tokens.dim(0) != rows * cols) {
    throw DimensionError("adapter: " + shape_str(tokens.shape()) + " tokens for a " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " grid");
  }
  const Tensor grid = reshape(tokens, {rows, cols, tokens.dim(1)});
  return conv2d(gelu(conv2d(grid, p.w1, p.b1)), p.w2, p.b2);
}

SmplxDecoderParams SmplxDecoderParams::init(std::int64_t d, std::int64_t channels, Rng& rng, DType dtype) {
  return {AdapterParams::init(d, channels, rng, dtype), param(normal_tensor({channels, kBodyDims}, 0.02, rng, dtype)),
          param(Tensor::zeros({kBodyDims}, dtype))};
}

void SmplxDecoderParams::append_named(const std::string& prefix, NamedTensors& out) const {
  adapter.append_named(prefix + ".adapter", out);
  out.emplace_back(prefix + ".head.weight", head_w);
  out.emplace_back(prefix + ".head.bias", head_b);
}

std::vector<Tensor*> SmplxDecoderParams::tensors() {
  auto t = adapter.tensors();
  t.push_back(&head_w);
  t.push_back(&head_b);
  return t;
}

BodyParams smplx_decoder(const Tensor& tokens, std::int64_t rows, std::int64_t cols, const SmplxDecoderParams& p) {
  const Tensor feats = adapter_forward(tokens, rows, cols, p.adapter);
  const Tensor pooled = reshape(mean_rows(reshape(feats, {rows * cols, p.adapter.channels()})), {1, p.adapter.channels()});
  const Tensor raw = reshape(add(matmul(pooled, p.head_w), p.head_b), {kBodyDims});
  constexpr int b0 = 0, t0 = kShapeDims, e0 = t0 + kPoseDims, c0 = e0 + kExprDims;
  BodyParams out;
  out.beta = slice(raw, 0, b0, t0);
  out.theta = scale(cnvs::tanh(slice(raw, 0, t0, e0)), std::numbers::pi);
  out.psi = slice(raw, 0, e0, c0);
  out.cam = concat({softplus(slice(raw, 0, c0, c0 + 1)), slice(raw, 0, c0 + 1, kBodyDims)}, 0);
  return out;
}

PointHeadParams PointHeadParams::init(std::int64_t d, std::int64_t channels, std::int64_t patch, Rng& rng, DType dtype,
                                      double depth_bias) {
  const auto width = 4 * patch * patch;
  std::vector<double> bias(static_cast<std::size_t>(width), 0.0);
  for (std::int64_t px = 0; px < patch * patch; ++px) {
    bias[static_cast<std::size_t>(px * 4 + 2)] = depth_bias;
  }
  return {AdapterParams::init(d, channels, rng, dtype), param(normal_tensor({channels, width}, 0.02, rng, dtype)),
          param(Tensor::from({width}, bias, dtype))};
}

void PointHeadParams::append_named(const std::string& prefix, NamedTensors& out) const {
  adapter.append_named(prefix + ".adapter", out);
  out.emplace_back(prefix + ".head.weight", head_w);
  out.emplace_back(prefix + ".head.bias", head_b);
}

std::vector<Tensor*> PointHeadParams::tensors() {
  auto t = adapter.tensors();
  t.push_back(&head_w);
  t.push_back(&head_b);
  return t;
}

PointMapPrediction point_head(const Tensor& tokens, std::int64_t rows, std::int64_t cols, std::int64_t patch,
                              const PointHeadParams& p) {
  const Tensor feats = adapter_forward(tokens, rows, cols, p.adapter);
  const Tensor flat = reshape(feats, {rows * cols, p.adapter.channels()});
  const Tensor maps = unpatchify(add(matmul(flat, p.head_w), p.head_b), rows, cols, patch);
  return {slice(maps, 2, 0, 3), softplus(slice(maps, 2, 3, 4)), feats};
}

}  // namespace cnvs
