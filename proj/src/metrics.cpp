#include "cnvs/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "cnvs/errors.hpp"

namespace cnvs {

namespace {

void check_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
}

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

std::vector<double> gaussian_window() {
  std::vector<double> w(kWindow);
  double sum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double x = i - kWindow / 2;
    w[static_cast<std::size_t>(i)] = std::exp(-x * x / (2 * kSigma * kSigma));
    sum += w[static_cast<std::size_t>(i)];
  }
  for (auto& v : w) {
    v /= sum;
  }
  return w;
}

// Separable valid-mode filtering of one channel plane [h x w].
std::vector<double> filter(const std::vector<double>& x, int h, int w, const std::vector<double>& k) {
  const int oh = h - kWindow + 1, ow = w - kWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow, 0.0), out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int i = 0; i < kWindow; ++i) {
        s += k[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(r * w + c + i)];
      }
      tmp[static_cast<std::size_t>(r * ow + c)] = s;
    }
  }
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int i = 0; i < kWindow; ++i) {
        s += k[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>((r + i) * ow + c)];
      }
      out[static_cast<std::size_t>(r * ow + c)] = s;
    }
  }
  return out;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
  check_same(a, b, "psnr");
  const auto x = a.to_vector(), y = b.to_vector();
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    se += (x[i] - y[i]) * (x[i] - y[i]);
  }
  const double mse = se / static_cast<double>(x.size());
  if (mse == 0.0) {
    return kPsnrCap;
  }
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

double ssim(const Tensor& a, const Tensor& b) {
  check_same(a, b, "ssim");
  if (a.rank() != 3) {
    throw DimensionError("ssim expects [H x W x C], got " + shape_str(a.shape()));
  }
  const int h = static_cast<int>(a.dim(0)), w = static_cast<int>(a.dim(1)), ch = static_cast<int>(a.dim(2));
  if (h < kWindow || w < kWindow) {
    throw ContractError("ssim needs images of at least 11x11, got " + shape_str(a.shape()));
  }
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto k = gaussian_window();
  const auto x = a.to_vector(), y = b.to_vector();
  double total = 0.0;
  for (int c = 0; c < ch; ++c) {
    std::vector<double> px(static_cast<std::size_t>(h) * w), py(px.size()), pxx(px.size()), pyy(px.size()),
        pxy(px.size());
    for (std::size_t i = 0; i < px.size(); ++i) {
      px[i] = x[i * static_cast<std::size_t>(ch) + static_cast<std::size_t>(c)];
      py[i] = y[i * static_cast<std::size_t>(ch) + static_cast<std::size_t>(c)];
      pxx[i] = px[i] * px[i];
      pyy[i] = py[i] * py[i];
      pxy[i] = px[i] * py[i];
    }
    const auto mx = filter(px, h, w, k), my = filter(py, h, w, k);
    const auto sxx = filter(pxx, h, w, k), syy = filter(pyy, h, w, k), sxy = filter(pxy, h, w, k);
    double sum = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cxy = sxy[i] - mx[i] * my[i];
      sum += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += sum / static_cast<double>(mx.size());
  }
  return total / ch;
}

void MetricReport::add(const ViewMetric& m) {
  views.push_back(m);
  finalize();
}

void MetricReport::finalize() {
  double p = 0.0, s = 0.0;
  for (const auto& v : views) {
    p += v.psnr_db;
    s += v.ssim;
  }
  mean_psnr = views.empty() ? 0.0 : p / static_cast<double>(views.size());
  mean_ssim = views.empty() ? 0.0 : s / static_cast<double>(views.size());
}

std::string MetricReport::csv() const {
  std::string out = "identity,view,psnr_db,ssim\n";
  char line[128];
  for (const auto& v : views) {
    std::snprintf(line, sizeof(line), "%d,%d,%.17g,%.17g\n", v.identity, v.view, v.psnr_db, v.ssim);
    out += line;
  }
  std::snprintf(line, sizeof(line), "mean,%d,%.17g,%.17g\n", count(), mean_psnr, mean_ssim);
  out += line;
  return out;
}

}  // namespace cnvs
