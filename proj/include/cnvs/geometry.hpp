#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "cnvs/camera.hpp"
#include "cnvs/checkpoint.hpp"
#include "cnvs/random.hpp"
#include "cnvs/tensor.hpp"

namespace cnvs {

inline constexpr int kShapeDims = 10;
inline constexpr int kProxyJoints = 16;
inline constexpr int kPoseDims = 3 * kProxyJoints;
inline constexpr int kExprDims = 10;
inline constexpr int kCamDims = 3;
inline constexpr int kBodyDims = kShapeDims + kPoseDims + kExprDims + kCamDims;

/// Subject reference point: the proxy stands on y = 0 with its middle here.
inline const Eigen::Vector3d kSubjectCenter{0.0, 0.9, 0.0};
inline constexpr double kCameraRadius = 2.0;

/// Body parameters of the capsule proxy.
///   beta  [10]  shape: 0 spine, 1 head, 2 upper arm, 3 forearm, 4 thigh, 5 shin lengths;
///               6 torso, 7 arm, 8 leg, 9 head radii. Each scales its quantity by (1 + 0.1 beta_k).
///   theta [48]  per-joint XYZ Euler angles in radians, R = Rz Ry Rx.
///   psi   [10]  expression: head-surface displacement and face albedo modulation.
///   cam   [3]   (scale, tx, ty): the weak-perspective placement seen from the frontal camera.
struct BodyParams {
  Tensor beta;
  Tensor theta;
  Tensor psi;
  Tensor cam;

  static BodyParams zeros(DType dtype);
  /// Rest configuration: zeros with cam scale 1.
  static BodyParams rest(DType dtype);
  BodyParams detach() const;
  /// Throws ContractError when theta leaves [-pi, pi] or the scale is not positive.
  void validate() const;
};

/// World translation of the subject encoded by cam = (s, tx, ty): (tx, ty, 2 - 2/s).
/// Depth offsets are clamped to +-0.5 m.
Eigen::Vector3d placement_from_cam(double scale, double tx, double ty);
/// Inverse of placement_from_cam for a translation with offsets inside the clamp range.
Eigen::Vector3d cam_from_placement(const Eigen::Vector3d& translation);

/// Text record: four lines `beta ...`, `theta ...`, `psi ...`, `cam ...`.
std::string format_body_params(const BodyParams& params);
BodyParams parse_body_params(const std::string& text, DType dtype);
BodyParams read_body_params(const std::string& path, DType dtype);
void write_body_params(const std::string& path, const BodyParams& params);

enum class BodyRegion : std::uint8_t { torso, head, arm, leg, foot };

struct Capsule {
  std::string name;
  int joint = 0;                    // frame the capsule rides in
  Eigen::Vector3d start;            // joint-local rest endpoints
  Eigen::Vector3d end;
  int length_beta = -1;             // scales the segment length (start fixed)
  double radius = 0.05;
  int radius_beta = -1;
  BodyRegion region = BodyRegion::torso;
};

/// Fixed kinematic tree with capsule geometry and a fixed surface-vertex template.
struct ProxySkeleton {
  std::vector<std::string> names;
  std::vector<int> parents;                     // -1 for the root
  std::vector<Eigen::Vector3d> offsets;         // rest offset from the parent (root: rest position)
  std::vector<int> length_beta;                 // beta index scaling the offset, or -1
  std::vector<Capsule> capsules;

  // Template: vertex v of capsule c sits at start + length * axis_coef + radius * radial_coef
  // in the joint frame, where length and radius follow beta.
  struct TemplateVertex {
    int capsule;
    Eigen::Vector3d axis_coef;
    Eigen::Vector3d radial_coef;
  };
  std::vector<TemplateVertex> vertices;
  std::vector<int> head_vertices;               // indices receiving expression offsets
  std::vector<Eigen::Vector3d> expression_basis;  // [head_vertices.size() * kExprDims], joint-local

  static const ProxySkeleton& standard();
  int joint_count() const { return static_cast<int>(parents.size()); }
  int vertex_count() const { return static_cast<int>(vertices.size()); }
  /// Throws ContractError unless the parent array describes one rooted tree in topological order.
  void validate() const;
  /// j itself and every joint below it.
  std::vector<int> subtree(int j) const;
};

/// A posed capsule in world coordinates.
struct WorldCapsule {
  Eigen::Vector3d a;
  Eigen::Vector3d b;
  double radius;
  int index;
  BodyRegion region;
  Eigen::Matrix3d frame;  // joint-to-world rotation
};

struct Posed {
  std::vector<Eigen::Matrix3d> rotations;
  std::vector<Eigen::Vector3d> positions;
  std::vector<WorldCapsule> capsules;
};

/// Double-precision forward kinematics (no graph), used for analytic rendering.
Posed pose_skeleton(const BodyParams& params, const ProxySkeleton& skeleton);
/// Top-to-bottom extent of the capsules for the given shape in the rest pose.
double rest_height(const BodyParams& params, const ProxySkeleton& skeleton);

/// XYZ Euler angles [3] -> rotation [3 x 3] with R = Rz(c) Ry(b) Rx(a).
Tensor euler_to_rotmat(const Tensor& angles);

/// Differentiable vertex set [V x 3] in world meters.
Tensor proxy_forward(const BodyParams& params, const ProxySkeleton& skeleton);

struct PositionMap {
  Tensor positions;  // [H x W x 3], world coordinates
  Tensor mask;       // [H x W x 1], 1 where any vertex contributes
};

inline constexpr double kPointSplatSigma = 1.0;    // pixels
inline constexpr double kPointSplatCutoff = 3.0;   // pixels
inline constexpr double kPointSplatDepthTau = 0.05;  // meters

/// Soft point splatting of vertices into the target view. Each pixel averages the world
/// coordinates of vertices within 3 px with weights (exp(-r^2 / 2) - exp(-9 / 2)) exp(-(z - z_min) / tau);
/// the kernel reaches zero at the cutoff, so the map is continuous except where the mask flips.
/// Differentiable in the vertex coordinates, including through the weights.
PositionMap render_position_map(const Tensor& vertices, const CameraPose& pose);

inline constexpr double kTriplaneLo[3] = {-1.0, 0.0, -1.0};
inline constexpr double kTriplaneHi[3] = {1.0, 2.0, 1.0};

struct TriplaneParams {
  Tensor xy;  // [R x R x C], rows follow y, columns follow x
  Tensor xz;  // rows follow z, columns follow x
  Tensor yz;  // rows follow z, columns follow y

  static TriplaneParams init(std::int64_t resolution, std::int64_t channels, Rng& rng, DType dtype);
  std::int64_t resolution() const { return xy.dim(0); }
  std::int64_t channels() const { return xy.dim(2); }
};

/// Sum of the three bilinearly sampled planes at each point [P x 3] -> [P x C].
/// Coordinates are clamped to the box; a plane coordinate u in [lo, hi] maps to the
/// continuous node index (u - lo) / (hi - lo) * (R - 1).
Tensor triplane_sample(const TriplaneParams& planes, const Tensor& points);

/// Per-pixel triplane features, zeroed outside the mask, averaged over `pool` x `pool` cells:
/// [H x W x 3] -> [H/pool x W/pool x C].
Tensor triplane_query(const Tensor& positions, const Tensor& mask, const TriplaneParams& planes, std::int64_t pool);

/// Spatial adapter: tokens on a grid, then 3x3 conv, GELU, 3x3 conv.
struct AdapterParams {
  Tensor w1, b1, w2, b2;

  static AdapterParams init(std::int64_t in, std::int64_t channels, Rng& rng, DType dtype);
  std::int64_t channels() const { return w2.dim(3); }
  void append_named(const std::string& prefix, NamedTensors& out) const;
  std::vector<Tensor*> tensors();
};

/// [rows*cols x d] tokens -> [rows x cols x C] feature grid.
Tensor adapter_forward(const Tensor& tokens, std::int64_t rows, std::int64_t cols, const AdapterParams& p);

struct SmplxDecoderParams {
  AdapterParams adapter;
  Tensor head_w;  // [C x kBodyDims]
  Tensor head_b;  // [kBodyDims]

  static SmplxDecoderParams init(std::int64_t d, std::int64_t channels, Rng& rng, DType dtype);
  void append_named(const std::string& prefix, NamedTensors& out) const;
  std::vector<Tensor*> tensors();
};

/// Adapter, global mean pool, then linear heads: theta = pi tanh(.), scale = softplus(.).
BodyParams smplx_decoder(const Tensor& tokens, std::int64_t rows, std::int64_t cols, const SmplxDecoderParams& p);

struct PointHeadParams {
  AdapterParams adapter;
  Tensor head_w;  // [C x 4 p^2]
  Tensor head_b;  // [4 p^2]

  /// `depth_bias` seeds the z channel bias; the subject sits about one camera radius away.
  static PointHeadParams init(std::int64_t d, std::int64_t channels, std::int64_t patch, Rng& rng, DType dtype,
                              double depth_bias = -kCameraRadius);
  void append_named(const std::string& prefix, NamedTensors& out) const;
  std::vector<Tensor*> tensors();
};

struct PointMapPrediction {
  Tensor points;      // [H x W x 3], target camera frame
  Tensor confidence;  // [H x W x 1], softplus > 0
  Tensor features;    // adapter grid [rows x cols x C]
};

PointMapPrediction point_head(const Tensor& tokens, std::int64_t rows, std::int64_t cols, std::int64_t patch,
                              const PointHeadParams& p);

}  // namespace cnvs
