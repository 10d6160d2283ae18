#include "cnvs/synth.hpp"

#include <openssl/evp.h>

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "cnvs/checkpoint.hpp"
#include "cnvs/image_io.hpp"

namespace cnvs {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

}  // namespace

double focal_for_width(int width) { return 0.5 * width / std::tan(0.5 * kFieldOfViewDeg * kDeg); }

CameraPose orbit_camera(double yaw_deg, double pitch_deg, int width, int height) {
  const double yaw = yaw_deg * kDeg, pitch = pitch_deg * kDeg;
  const Eigen::Vector3d offset(std::sin(yaw) * std::cos(pitch), std::sin(pitch), std::cos(yaw) * std::cos(pitch));
  return CameraPose::look_at(kSubjectCenter + kCameraRadius * offset, kSubjectCenter, Eigen::Vector3d::UnitY(),
                             focal_for_width(width), width, height);
}

std::vector<CameraPose> sample_cameras(std::uint64_t seed, int count, int width, int height) {
  if (count < 5) {
    throw ConfigError("sample_cameras needs at least 5 views (frontal plus four corners), got " +
                      std::to_string(count));
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(-kFrustumHalfAngleDeg, kFrustumHalfAngleDeg);
  std::vector<CameraPose> out;
  out.push_back(orbit_camera(0.0, 0.0, width, height));
  for (int i = 0; i < count - 5; ++i) {
    const double yaw = angle(rng);
    const double pitch = angle(rng);
    out.push_back(orbit_camera(yaw, pitch, width, height));
  }
  for (double yaw : {-kFrustumHalfAngleDeg, kFrustumHalfAngleDeg}) {
    for (double pitch : {-kFrustumHalfAngleDeg, kFrustumHalfAngleDeg}) {
      out.push_back(orbit_camera(yaw, pitch, width, height));
    }
  }
  return out;
}

Eigen::Vector2d view_angles(const CameraPose& pose) {
  const Eigen::Vector3d d = (pose.center() - kSubjectCenter).normalized();
  return {std::atan2(d.x(), d.z()) / kDeg, std::asin(std::clamp(d.y(), -1.0, 1.0)) / kDeg};
}

// ---------------------------------------------------------------------------
// Scenes

namespace {

// Per-joint uniform pose ranges (radians) for a relaxed standing subject facing +z.
struct AngleRange {
  double lo[3];
  double hi[3];
};

const AngleRange kPoseRanges[kProxyJoints] = {
    {{-0.08, -0.25, -0.05}, {0.08, 0.25, 0.05}},  // pelvis
    {{-0.15, -0.15, -0.1}, {0.15, 0.15, 0.1}},    // spine
    {{-0.2, -0.2, -0.1}, {0.2, 0.2, 0.1}},        // neck
    {{-0.2, -0.3, -0.15}, {0.2, 0.3, 0.15}},      // head
    {{-0.6, -0.3, 0.05}, {0.6, 0.3, 0.9}},        // l_shoulder
    {{-1.2, -0.2, -0.1}, {0.0, 0.2, 0.1}},        // l_elbow
    {{-0.2, -0.2, -0.2}, {0.2, 0.2, 0.2}},        // l_wrist
    {{-0.6, -0.3, -0.9}, {0.6, 0.3, -0.05}},      // r_shoulder
    {{-1.2, -0.2, -0.1}, {0.0, 0.2, 0.1}},        // r_elbow
    {{-0.2, -0.2, -0.2}, {0.2, 0.2, 0.2}},        // r_wrist
    {{-0.4, -0.15, -0.05}, {0.3, 0.15, 0.15}},    // l_hip
    {{0.0, -0.05, -0.05}, {0.8, 0.05, 0.05}},     // l_knee
    {{-0.15, -0.1, -0.1}, {0.15, 0.1, 0.1}},      // l_ankle
    {{-0.4, -0.15, -0.15}, {0.3, 0.15, 0.05}},    // r_hip
    {{0.0, -0.05, -0.05}, {0.8, 0.05, 0.05}},     // r_knee
    {{-0.15, -0.1, -0.1}, {0.15, 0.1, 0.1}},      // r_ankle
};

Eigen::Vector3d random_color(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  const double r = u(rng);
  const double g = u(rng);
  const double b = u(rng);
  return {r, g, b};
}

std::vector<Eigen::Vector3d> region_albedo(const std::vector<WorldCapsule>& capsules, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> tone(0.45, 0.85);
  const double t = tone(rng);
  const Eigen::Vector3d skin(t, 0.78 * t, 0.62 * t);
  const Eigen::Vector3d shirt = random_color(rng, 0.15, 0.95);
  const Eigen::Vector3d pants = random_color(rng, 0.1, 0.7);
  const Eigen::Vector3d shoes = random_color(rng, 0.05, 0.4);
  std::vector<Eigen::Vector3d> out;
  for (const auto& c : capsules) {
    switch (c.region) {
      case BodyRegion::head:
        out.push_back(skin);
        break;
      case BodyRegion::arm:
        out.push_back(c.index == 6 || c.index == 8 ? skin : shirt);  // forearms bare
        break;
      case BodyRegion::torso:
        out.push_back(c.index == 3 ? skin : (c.index == 0 ? pants : shirt));  // neck, hips
        break;
      case BodyRegion::leg:
        out.push_back(pants);
        break;
      case BodyRegion::foot:
        out.push_back(shoes);
        break;
    }
  }
  return out;
}

Tensor vec_tensor(const std::vector<double>& v) {
  return Tensor::from({static_cast<std::int64_t>(v.size())}, v, DType::f64);
}

}  // namespace

SyntheticScene SyntheticScene::random(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& skel = ProxySkeleton::standard();
  std::normal_distribution<double> n01(0.0, 1.0);
  BodyParams body = BodyParams::rest(DType::f64);
  std::vector<double> beta(kShapeDims);
  double height = 0.0;
  for (int attempt = 0;; ++attempt) {
    for (auto& b : beta) {
      b = 0.7 * n01(rng);
    }
    body.beta = vec_tensor(beta);
    height = rest_height(body, skel);
    if (std::abs(height - kTargetHeight) <= kHeightTolerance) {
      break;
    }
    if (attempt > 10000) {
      throw ContractError("height rejection sampling did not converge");
    }
  }
  std::vector<double> theta(kPoseDims);
  for (int j = 0; j < kProxyJoints; ++j) {
    for (int a = 0; a < 3; ++a) {
      theta[static_cast<std::size_t>(3 * j + a)] =
          std::uniform_real_distribution<double>(kPoseRanges[j].lo[a], kPoseRanges[j].hi[a])(rng);
    }
  }
  std::vector<double> psi(kExprDims);
  for (auto& p : psi) {
    p = n01(rng);
  }
  std::uniform_real_distribution<double> jitter(-kPlacementJitter, kPlacementJitter);
  const double tx = jitter(rng);
  const double tz = jitter(rng);
  const Eigen::Vector3d cam = cam_from_placement({tx, 0.0, tz});
  body.theta = vec_tensor(theta);
  body.psi = vec_tensor(psi);
  body.cam = vec_tensor({cam.x(), cam.y(), cam.z()});

  SyntheticScene scene;
  scene.body = body;
  scene.capsules = pose_skeleton(body, skel).capsules;
  scene.albedo = region_albedo(scene.capsules, rng);
  std::uniform_real_distribution<double> tilt(-0.4, 0.4);
  const double lx = tilt(rng);
  const double ly = 0.5 + tilt(rng);
  scene.light = Eigen::Vector3d(lx, ly, 1.0).normalized();
  scene.height = height;
  return scene;
}

SyntheticScene SyntheticScene::from_body(const BodyParams& body, std::uint64_t color_seed) {
  std::mt19937_64 rng(color_seed);
  const BodyParams b{body.beta.to(DType::f64), body.theta.to(DType::f64), body.psi.to(DType::f64),
                     body.cam.to(DType::f64)};
  SyntheticScene scene;
  scene.body = b;
  scene.capsules = pose_skeleton(b, ProxySkeleton::standard()).capsules;
  scene.albedo = region_albedo(scene.capsules, rng);
  scene.light = Eigen::Vector3d(0.2, 0.5, 1.0).normalized();
  scene.height = rest_height(b, ProxySkeleton::standard());
  return scene;
}

// ---------------------------------------------------------------------------
// Ray casting

namespace {

// Entering intersection of a ray (unit direction) with the capsule a-b of radius r.
std::optional<double> intersect_capsule(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Eigen::Vector3d& a,
                                        const Eigen::Vector3d& b, double r) {
  const Eigen::Vector3d ba = b - a, oa = o - a;
  const double baba = ba.dot(ba), bard = ba.dot(d), baoa = ba.dot(oa), rdoa = d.dot(oa), oaoa = oa.dot(oa);
  if (baba > 0.0) {
    const double qa = baba - bard * bard;
    const double qb = baba * rdoa - baoa * bard;
    const double qc = baba * oaoa - baoa * baoa - r * r * baba;
    const double h = qb * qb - qa * qc;
    if (qa > 1e-15 && h >= 0.0) {
      const double t = (-qb - std::sqrt(h)) / qa;
      const double y = baoa + t * bard;
      if (y > 0.0 && y < baba) {
        return t > 0.0 ? std::optional<double>(t) : std::nullopt;
      }
    }
  }
  // End spheres.
  std::optional<double> best;
  for (const Eigen::Vector3d* c : {&a, &b}) {
    const Eigen::Vector3d oc = o - *c;
    const double hb = d.dot(oc);
    const double hc = oc.dot(oc) - r * r;
    const double h = hb * hb - hc;
    if (h >= 0.0) {
      const double t = -hb - std::sqrt(h);
      if (t > 0.0 && (!best || t < *best)) {
        best = t;
      }
    }
  }
  return best;
}

// Face albedo modulation driven by the expression coefficients, on the front of the head.
double face_modulation(const SyntheticScene& scene, const WorldCapsule& cap, const Eigen::Vector3d& p) {
  const Eigen::Vector3d q = cap.frame.transpose() * (p - cap.a);
  if (q.z() <= 0.0) {
    return 1.0;
  }
  const auto psi = scene.body.psi.to_vector();
  double m = 0.0;
  for (int k = 0; k < kExprDims; ++k) {
    m += psi[static_cast<std::size_t>(k)] * std::sin(18.0 * q.x() * (1 + k % 3) + 11.0 * q.y() * (1 + (k / 3) % 3) + k);
  }
  return 1.0 + 0.25 * std::tanh(0.5 * m) * std::min(1.0, q.z() / cap.radius);
}

}  // namespace

std::optional<SurfaceHit> intersect_scene(const SyntheticScene& scene, const Eigen::Vector3d& origin,
                                          const Eigen::Vector3d& direction) {
  std::optional<SurfaceHit> best;
  for (std::size_t c = 0; c < scene.capsules.size(); ++c) {
    const WorldCapsule& cap = scene.capsules[c];
    const auto t = intersect_capsule(origin, direction, cap.a, cap.b, cap.radius);
    if (t && (!best || *t < best->t)) {
      const Eigen::Vector3d p = origin + *t * direction;
      const Eigen::Vector3d ba = cap.b - cap.a;
      const double baba = ba.dot(ba);
      const double h = baba > 0.0 ? std::clamp((p - cap.a).dot(ba) / baba, 0.0, 1.0) : 0.0;
      best = SurfaceHit{*t, p, (p - (cap.a + h * ba)).normalized(), static_cast<int>(c)};
    }
  }
  return best;
}

GroundTruthView render_gt(const SyntheticScene& scene, const CameraPose& pose, DType dtype) {
  pose.validate();
  const int w = pose.width, h = pose.height;
  std::vector<double> image(static_cast<std::size_t>(w) * h * 3, 0.0), points(image.size(), 0.0),
      mask(static_cast<std::size_t>(w) * h, 0.0);
  const Eigen::Vector3d origin = pose.center();
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const Eigen::Vector3d dir = pose.pixel_direction(u, v);
      const auto hit = intersect_scene(scene, origin, dir);
      if (!hit) {
        continue;
      }
      const auto p = static_cast<std::size_t>(v * w + u);
      const WorldCapsule& cap = scene.capsules[static_cast<std::size_t>(hit->capsule)];
      Eigen::Vector3d albedo = scene.albedo[static_cast<std::size_t>(hit->capsule)];
      if (cap.region == BodyRegion::head) {
        albedo *= face_modulation(scene, cap, hit->point);
      }
      const double shade = 0.3 + 0.7 * std::max(0.0, hit->normal.dot(scene.light));
      const Eigen::Vector3d cam = pose.to_camera(hit->point);
      for (int a = 0; a < 3; ++a) {
        image[p * 3 + static_cast<std::size_t>(a)] = std::clamp(albedo[a] * shade, 0.0, 1.0);
        points[p * 3 + static_cast<std::size_t>(a)] = cam[a];
      }
      mask[p] = 1.0;
    }
  }
  return {Tensor::from({h, w, 3}, image, dtype), Tensor::from({h, w, 3}, points, dtype),
          Tensor::from({h, w, 1}, mask, dtype)};
}

// ---------------------------------------------------------------------------
// Checksums and manifest

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256 computation failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file_bytes(path)); }

std::string Manifest::format() const {
  std::ostringstream os;
  os << "identity,view,role,path,sha256\n";
  for (const auto& e : entries) {
    os << e.identity << ',' << e.view << ',' << e.role << ',' << e.path << ',' << e.sha256 << '\n';
  }
  return os.str();
}

Manifest Manifest::parse(const std::string& text) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.rfind("identity,", 0) == 0) {
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ls(line);
    std::string f;
    while (std::getline(ls, f, ',')) {
      fields.push_back(f);
    }
    if (fields.size() != 5) {
      throw IoError("manifest line " + std::to_string(line_no) + ": expected 5 fields, got " +
                    std::to_string(fields.size()));
    }
    ManifestEntry e;
    try {
      e.identity = std::stoi(fields[0]);
      e.view = std::stoi(fields[1]);
    } catch (const std::exception&) {
      throw IoError("manifest line " + std::to_string(line_no) + ": bad identity/view");
    }
    e.role = fields[2];
    e.path = fields[3];
    e.sha256 = fields[4];
    m.entries.push_back(e);
  }
  return m;
}

Manifest Manifest::read(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse(std::string(bytes.begin(), bytes.end()));
}

void Manifest::write(const std::filesystem::path& path) const {
  const std::string text = format();
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

int Manifest::sample_count() const {
  std::set<std::pair<int, int>> samples;
  for (const auto& e : entries) {
    if (e.view >= 0) {
      samples.insert({e.identity, e.view});
    }
  }
  return static_cast<int>(samples.size());
}

std::uint64_t identity_seed(std::uint64_t seed, int identity) {
  // splitmix64 over (seed, identity)
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(identity) + 1;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Manifest make_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir) {
  if (config.identities < 1) {
    throw ConfigError("dataset needs at least one identity");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) {
    throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  }
  Manifest manifest;
  auto record = [&](int identity, int view, const char* role, const std::string& rel) {
    manifest.entries.push_back({identity, view, role, rel, sha256_file(out_dir / rel)});
  };
  for (int i = 0; i < config.identities; ++i) {
    const std::uint64_t seed = identity_seed(config.seed, i);
    const SyntheticScene scene = SyntheticScene::random(seed);
    const auto cameras = sample_cameras(seed ^ 0xC0FFEEULL, config.views, config.width, config.height);
    char dir[32];
    std::snprintf(dir, sizeof(dir), "id%03d", i);
    std::filesystem::create_directories(out_dir / dir, ec);
    if (ec) {
      throw IoError("cannot create " + (out_dir / dir).string() + ": " + ec.message());
    }
    const std::string body_rel = std::string(dir) + "/body.txt";
    write_body_params((out_dir / body_rel).string(), scene.body);
    record(i, -1, "body", body_rel);
    for (int v = 0; v < config.views; ++v) {
      const auto& pose = cameras[static_cast<std::size_t>(v)];
      const GroundTruthView gt = render_gt(scene, pose, DType::f64);
      char stem[64];
      std::snprintf(stem, sizeof(stem), "%s/view%03d", dir, v);
      const std::string base(stem);
      write_ppm((out_dir / (base + ".ppm")).string(), gt.image);
      write_point_map((out_dir / (base + ".pmpt")).string(), gt.points, gt.mask);
      write_pose_file((out_dir / (base + ".pose")).string(), pose);
      record(i, v, "image", base + ".ppm");
      record(i, v, "points", base + ".pmpt");
      record(i, v, "pose", base + ".pose");
    }
  }
  manifest.write(out_dir / "manifest.csv");
  return manifest;
}

Dataset load_dataset(const std::filesystem::path& manifest_path, DType dtype) {
  const Manifest manifest = Manifest::read(manifest_path);
  Dataset ds;
  ds.root = manifest_path.parent_path();
  std::map<int, IdentitySamples> ids;
  std::map<std::pair<int, int>, ViewSample> views;
  for (const auto& e : manifest.entries) {
    const auto path = ds.root / e.path;
    if (!std::filesystem::exists(path)) {
      throw IoError("missing asset " + path.string());
    }
    if (sha256_file(path) != e.sha256) {
      throw IoError("checksum mismatch for " + path.string());
    }
    auto& id = ids[e.identity];
    id.identity = e.identity;
    if (e.role == "body") {
      id.body = read_body_params(path.string(), DType::f64);
      continue;
    }
    auto& vs = views[{e.identity, e.view}];
    vs.view = e.view;
    if (e.role == "image") {
      vs.image = read_ppm(path.string(), dtype);
    } else if (e.role == "points") {
      auto pm = read_point_map(path.string(), dtype);
      vs.points = pm.points;
      vs.mask = pm.confidence;
    } else if (e.role == "pose") {
      vs.pose = read_pose_file(path.string());
    } else {
      throw IoError("manifest: unknown role '" + e.role + "'");
    }
  }
  for (auto& [key, vs] : views) {
    if (!vs.image.defined() || !vs.points.defined() || vs.pose.width <= 1) {
      throw IoError("manifest: identity " + std::to_string(key.first) + " view " + std::to_string(key.second) +
                    " lacks an image, point map or pose");
    }
    ids[key.first].views.push_back(vs);
    ds.width = vs.pose.width;
    ds.height = vs.pose.height;
  }
  for (auto& [i, id] : ids) {
    if (!id.body.beta.defined()) {
      throw IoError("manifest: identity " + std::to_string(i) + " has no body record");
    }
    ds.identities.push_back(std::move(id));
  }
  return ds;
}

}  // namespace cnvs
