#include "cnvs/splat.hpp"

#include <algorithm>
#include <cmath>

#include "cnvs/ops.hpp"

namespace cnvs {

using detail::attach;
using detail::make_node;

namespace {

struct Footprint {
  double x = 0, y = 0;      // screen position
  double depth = 0;         // distance along the optical axis
  double sigma = 0;         // screen-space standard deviation, pixels
  Eigen::Vector3d cam;      // camera-frame mean
  bool visible = false;
};

// Contributor lists per pixel in compositing order, stored CSR style.
struct PixelLists {
  std::vector<std::int64_t> offsets;
  std::vector<std::int32_t> index;
};

void check_set(const GaussianSet& g) {
  const auto n = g.size();
  if (n == 0) {
    return;
  }
  if (g.means.rank() != 2 || g.means.dim(1) != 3 || g.scales.shape() != Shape{n} || g.opacity.shape() != Shape{n} ||
      g.colors.shape() != Shape{n, 3}) {
    throw DimensionError("splat_render: inconsistent gaussian fields, means " + shape_str(g.means.shape()) +
                         ", scales " + shape_str(g.scales.shape()) + ", opacity " + shape_str(g.opacity.shape()) +
                         ", colors " + shape_str(g.colors.shape()));
  }
}

std::vector<Footprint> project_all(const std::vector<double>& means, const std::vector<double>& scales,
                                   const CameraPose& pose) {
  const double fbar = 0.5 * (pose.fx + pose.fy);
  std::vector<Footprint> out(scales.size());
  for (std::size_t i = 0; i < scales.size(); ++i) {
    Footprint& f = out[i];
    f.cam = pose.to_camera({means[3 * i], means[3 * i + 1], means[3 * i + 2]});
    f.depth = -f.cam.z();
    if (f.depth <= kSplatNearPlane) {
      continue;
    }
    f.x = pose.cx + pose.fx * f.cam.x() / f.depth;
    f.y = pose.cy - pose.fy * f.cam.y() / f.depth;
    f.sigma = fbar * scales[i] / f.depth;
    f.visible = f.sigma > 0;
  }
  return out;
}

PixelLists bin(const std::vector<Footprint>& fp, int width, int height) {
  std::vector<std::vector<std::pair<double, std::int32_t>>> cells(static_cast<std::size_t>(width) * height);
  for (std::size_t i = 0; i < fp.size(); ++i) {
    const Footprint& f = fp[i];
    if (!f.visible) {
      continue;
    }
    const double r = kSplatCutoffSigmas * f.sigma;
    const int u0 = std::max(0, static_cast<int>(std::floor(f.x - r - 0.5)));
    const int u1 = std::min(width - 1, static_cast<int>(std::ceil(f.x + r - 0.5)));
    const int v0 = std::max(0, static_cast<int>(std::floor(f.y - r - 0.5)));
    const int v1 = std::min(height - 1, static_cast<int>(std::ceil(f.y + r - 0.5)));
    for (int v = v0; v <= v1; ++v) {
      for (int u = u0; u <= u1; ++u) {
        const double dx = u + 0.5 - f.x, dy = v + 0.5 - f.y;
        if (dx * dx + dy * dy <= r * r) {
          cells[static_cast<std::size_t>(v) * width + u].emplace_back(f.depth, static_cast<std::int32_t>(i));
        }
      }
    }
  }
  PixelLists lists;
  lists.offsets.reserve(cells.size() + 1);
  lists.offsets.push_back(0);
  for (auto& c : cells) {
    std::sort(c.begin(), c.end());
    const std::size_t keep = std::min<std::size_t>(c.size(), kSplatMaxContributors);
    for (std::size_t k = 0; k < keep; ++k) {
      lists.index.push_back(c[k].second);
    }
    lists.offsets.push_back(static_cast<std::int64_t>(lists.index.size()));
  }
  return lists;
}

}  // namespace

SplatImage splat_render(const GaussianSet& g, const CameraPose& pose) {
  pose.validate();
  check_set(g);
  const int W = pose.width, H = pose.height;
  const DType dt = g.size() ? g.means.dtype() : default_dtype();
  auto out = make_node({H, W, 4}, dt, "splat_render");
  if (g.size() == 0) {
    Tensor rgba(out);
    return {slice(rgba, 2, 0, 3), slice(rgba, 2, 3, 4)};
  }
  const auto means = g.means.to_vector(), scales = g.scales.to_vector(), opacity = g.opacity.to_vector(),
             colors = g.colors.to_vector();
  auto fp = std::make_shared<std::vector<Footprint>>(project_all(means, scales, pose));
  auto lists = std::make_shared<PixelLists>(bin(*fp, W, H));

  dispatch(dt, [&]<class T>() {
    T* o = out->values<T>().data();
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(W) * H; ++p) {
      const double px = static_cast<double>(p % W) + 0.5, py = static_cast<double>(p / W) + 0.5;
      double trans = 1.0, c[3] = {0, 0, 0};
      for (auto k = lists->offsets[p]; k < lists->offsets[p + 1]; ++k) {
        const auto i = static_cast<std::size_t>(lists->index[static_cast<std::size_t>(k)]);
        const Footprint& f = (*fp)[i];
        const double d2 = (px - f.x) * (px - f.x) + (py - f.y) * (py - f.y);
        const double w = opacity[i] * std::exp(-d2 / (2 * f.sigma * f.sigma));
        for (int ch = 0; ch < 3; ++ch) {
          c[ch] += colors[3 * i + ch] * w * trans;
        }
        trans *= 1 - w;
      }
      for (int ch = 0; ch < 3; ++ch) {
        o[p * 4 + ch] = static_cast<T>(c[ch]);
      }
      o[p * 4 + 3] = static_cast<T>(1 - trans);
    }
  });

  if (detail::needs_grad({&g.means, &g.scales, &g.opacity, &g.colors})) {
    auto mn = g.means.node_ptr(), sn = g.scales.node_ptr(), an = g.opacity.node_ptr(), cn = g.colors.node_ptr();
    attach(out, {mn, sn, an, cn},
           [mn, sn, an, cn, fp, lists, scales, opacity, colors, pose, W, H](Node& self) {
             dispatch(self.dtype, [&]<class T>() {
               const std::size_t n = scales.size();
               std::vector<double> dmean(3 * n, 0.0), dscale(n, 0.0), dalpha(n, 0.0), dcolor(3 * n, 0.0);
               // Screen-space gradients per gaussian: d/dx, d/dy, d/dsigma_px.
               std::vector<double> dx(n, 0.0), dy(n, 0.0), dsig(n, 0.0);
               const T* go = self.grads<T>().data();
               std::vector<double> w, gauss, trans;
               std::vector<std::size_t> ids;
               for (std::int64_t p = 0; p < static_cast<std::int64_t>(W) * H; ++p) {
                 const auto b = lists->offsets[p], e = lists->offsets[p + 1];
                 if (b == e) {
                   continue;
                 }
                 const double px = static_cast<double>(p % W) + 0.5, py = static_cast<double>(p / W) + 0.5;
                 const double gc[3] = {go[p * 4], go[p * 4 + 1], go[p * 4 + 2]};
                 const double ga = go[p * 4 + 3];
                 ids.clear();
                 w.clear();
                 gauss.clear();
                 trans.clear();
                 double t = 1.0;
                 for (auto k = b; k < e; ++k) {
                   const auto i = static_cast<std::size_t>(lists->index[static_cast<std::size_t>(k)]);
                   const Footprint& f = (*fp)[i];
                   const double d2 = (px - f.x) * (px - f.x) + (py - f.y) * (py - f.y);
                   const double gv = std::exp(-d2 / (2 * f.sigma * f.sigma));
                   ids.push_back(i);
                   gauss.push_back(gv);
                   w.push_back(opacity[i] * gv);
                   trans.push_back(t);
                   t *= 1 - opacity[i] * gv;
                 }
                 // Back to front: acc_c is the color composited behind layer k, acc_a the alpha.
                 double acc_c[3] = {0, 0, 0}, acc_a = 0;
                 for (auto k = static_cast<std::int64_t>(ids.size()) - 1; k >= 0; --k) {
                   const auto uk = static_cast<std::size_t>(k);
                   const std::size_t i = ids[uk];
                   const Footprint& f = (*fp)[i];
                   double dw = ga * (1 - acc_a);
                   for (int ch = 0; ch < 3; ++ch) {
                     dcolor[3 * i + ch] += gc[ch] * w[uk] * trans[uk];
                     dw += gc[ch] * (colors[3 * i + ch] - acc_c[ch]);
                   }
                   dw *= trans[uk];
                   dalpha[i] += dw * gauss[uk];
                   const double dg = dw * opacity[i];
                   const double s2 = f.sigma * f.sigma;
                   const double ex = px - f.x, ey = py - f.y;
                   dx[i] += dg * gauss[uk] * ex / s2;
                   dy[i] += dg * gauss[uk] * ey / s2;
                   dsig[i] += dg * gauss[uk] * (ex * ex + ey * ey) / (s2 * f.sigma);
                   for (int ch = 0; ch < 3; ++ch) {
                     acc_c[ch] = colors[3 * i + ch] * w[uk] + (1 - w[uk]) * acc_c[ch];
                   }
                   acc_a = w[uk] + (1 - w[uk]) * acc_a;
                 }
               }
               const double fbar = 0.5 * (pose.fx + pose.fy);
               for (std::size_t i = 0; i < n; ++i) {
                 const Footprint& f = (*fp)[i];
                 if (!f.visible) {
                   continue;
                 }
                 const double z = f.depth;
                 dscale[i] = dsig[i] * fbar / z;
                 const double dz = dx[i] * (-pose.fx * f.cam.x() / (z * z)) + dy[i] * (pose.fy * f.cam.y() / (z * z)) +
                                   dsig[i] * (-fbar * scales[i] / (z * z));
                 const Eigen::Vector3d dcam(dx[i] * pose.fx / z, -dy[i] * pose.fy / z, -dz);
                 const Eigen::Vector3d dm = pose.rotation.transpose() * dcam;
                 for (int a = 0; a < 3; ++a) {
                   dmean[3 * i + a] = dm[a];
                 }
               }
               auto push = [](Node& node, const std::vector<double>& grad) {
                 if (!node.requires_grad) {
                   return;
                 }
                 auto dst = node.grad_buffer<T>();
                 for (std::size_t k = 0; k < dst.size(); ++k) {
                   dst[k] += static_cast<T>(grad[k]);
                 }
               };
               push(*mn, dmean);
               push(*sn, dscale);
               push(*an, dalpha);
               push(*cn, dcolor);
             });
           });
  }
  Tensor rgba(out);
  return {slice(rgba, 2, 0, 3), slice(rgba, 2, 3, 4)};
}

}  // namespace cnvs
