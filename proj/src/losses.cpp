#include "cnvs/losses.hpp"

#include <cmath>
#include <cstdio>

#include "cnvs/ops.hpp"

namespace cnvs {

void LossWeights::validate() const {
  for (double v : {nvs, gs, pts, smplx, lpips, distill, conf, abs}) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ConfigError("loss weights must be finite and non-negative");
    }
  }
  if (pts_scales < 1 || pts_scales > 8) {
    throw ConfigError("pts_scales must lie in [1, 8], got " + std::to_string(pts_scales));
  }
}

namespace {

void require_same(const char* what, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
}

Tensor accumulate(const Tensor& total, const Tensor& term) { return total.defined() ? add(total, term) : term; }

// Pooled validity: a cell is valid when every pixel under it is.
std::vector<double> pool_mask(const std::vector<double>& m, std::int64_t h, std::int64_t w, std::int64_t f) {
  const std::int64_t oh = h / f, ow = w / f;
  std::vector<double> out(static_cast<std::size_t>(oh * ow), 1.0);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      if (m[static_cast<std::size_t>(y * w + x)] < 0.5) {
        out[static_cast<std::size_t>((y / f) * ow + x / f)] = 0.0;
      }
    }
  }
  return out;
}

struct DiffTerm {
  Tensor weighted_sum;
  std::int64_t count = 0;
};

// Confidence-weighted L1 of forward differences along `axis` (0: y, 1: x), summed over valid pairs.
DiffTerm diff_term(const Tensor& x, const Tensor& gt, const Tensor& conf, const std::vector<double>& valid,
                   std::int64_t h, std::int64_t w, int axis) {
  const std::int64_t n = axis == 0 ? h : w;
  if (n < 2) {
    return {};
  }
  const std::int64_t ph = axis == 0 ? h - 1 : h, pw = axis == 0 ? w : w - 1;
  std::vector<double> pair(static_cast<std::size_t>(ph * pw));
  std::int64_t count = 0;
  for (std::int64_t y = 0; y < ph; ++y) {
    for (std::int64_t xx = 0; xx < pw; ++xx) {
      const std::int64_t y2 = axis == 0 ? y + 1 : y, x2 = axis == 0 ? xx : xx + 1;
      const double v = valid[static_cast<std::size_t>(y * w + xx)] * valid[static_cast<std::size_t>(y2 * w + x2)];
      pair[static_cast<std::size_t>(y * pw + xx)] = v;
      count += v > 0.5 ? 1 : 0;
    }
  }
  if (count == 0) {
    return {};
  }
  auto fwd = [&](const Tensor& t) { return sub(slice(t, axis, 1, n), slice(t, axis, 0, n - 1)); };
  const Tensor err = cnvs::abs(sub(fwd(x), fwd(gt)));
  const Tensor weight = mul(slice(conf, axis, 0, n - 1), Tensor::from({ph, pw, 1}, pair, x.dtype()));
  return {sum(mul(err, expand_last(weight, x.dim(2)))), count};
}

}  // namespace

Tensor gradient_surrogate(const Tensor& a, const Tensor& b) {
  require_same("gradient_surrogate", a, b);
  if (a.rank() != 3) {
    throw DimensionError("gradient_surrogate: expected [H x W x C], got " + shape_str(a.shape()));
  }
  Tensor total;
  int used = 0;
  for (std::int64_t f : {1, 2, 4}) {
    if (a.dim(0) % f != 0 || a.dim(1) % f != 0 || a.dim(0) / f < 3 || a.dim(1) / f < 3) {
      continue;
    }
    const Tensor as = f == 1 ? a : avg_pool2d(a, f);
    const Tensor bs = f == 1 ? b : avg_pool2d(b, f);
    total = accumulate(total, l1(sobel(as), sobel(bs)));
    ++used;
  }
  if (used == 0) {
    throw ContractError("gradient_surrogate: image " + shape_str(a.shape()) + " is smaller than 3x3");
  }
  return scale(total, 1.0 / used);
}

Tensor loss_nvs(const Tensor& pred, const Tensor& target, const LossWeights& weights) {
  require_same("loss_nvs", pred, target);
  return add(mse(pred, target), scale(gradient_surrogate(pred, target), weights.lpips));
}

Tensor loss_gs(const Tensor& pred, const Tensor& target, const LossWeights& weights) {
  return loss_nvs(pred, target, weights);
}

Tensor loss_pts(const PointMapPrediction& pred, const Tensor& gt_points, const Tensor& mask,
                const LossWeights& weights) {
  weights.validate();
  const Tensor& x = pred.points;
  const Tensor& conf = pred.confidence;
  require_same("loss_pts", x, gt_points);
  if (x.rank() != 3 || x.dim(2) != 3 || conf.shape() != Shape{x.dim(0), x.dim(1), 1} || mask.shape() != conf.shape()) {
    throw DimensionError("loss_pts: points " + shape_str(x.shape()) + ", confidence " + shape_str(conf.shape()) +
                         ", mask " + shape_str(mask.shape()) + " do not describe one H x W map");
  }
  const DType dt = x.dtype();
  const Tensor gt = gt_points.detach().to(dt);
  const std::int64_t h = x.dim(0), w = x.dim(1);
  std::vector<double> m = mask.to_vector();
  std::int64_t valid = 0;
  for (auto& v : m) {
    v = v > 0.5 ? 1.0 : 0.0;
    valid += static_cast<std::int64_t>(v);
  }

  Tensor total = Tensor::scalar(0.0, dt);
  for (int k = 0; k < weights.pts_scales; ++k) {
    const std::int64_t f = std::int64_t{1} << k;
    if (h % f != 0 || w % f != 0) {
      break;
    }
    const std::int64_t hk = h / f, wk = w / f;
    const Tensor xk = f == 1 ? x : avg_pool2d(x, f);
    const Tensor gk = f == 1 ? gt : avg_pool2d(gt, f);
    const Tensor ck = f == 1 ? conf : avg_pool2d(conf, f);
    const auto mk = pool_mask(m, h, w, f);
    const DiffTerm dx = diff_term(xk, gk, ck, mk, hk, wk, 1);
    const DiffTerm dy = diff_term(xk, gk, ck, mk, hk, wk, 0);
    const std::int64_t count = dx.count + dy.count;
    if (count == 0) {
      continue;
    }
    Tensor s;
    for (const DiffTerm* t : {&dx, &dy}) {
      if (t->count > 0) {
        s = accumulate(s, t->weighted_sum);
      }
    }
    total = add(total, scale(s, std::ldexp(1.0, -k) / static_cast<double>(count * 3)));
  }
  if (valid > 0) {
    const Tensor mc = Tensor::from({h, w, 1}, m, dt);
    if (weights.abs > 0.0) {
      const Tensor err = mul(cnvs::abs(sub(x, gt)), expand_last(mul(conf, mc), 3));
      total = add(total, scale(sum(err), weights.abs / static_cast<double>(valid * 3)));
    }
    if (weights.conf > 0.0) {
      total = add(total, scale(sum(mul(cnvs::log(conf), mc)), -weights.conf / static_cast<double>(valid)));
    }
  }
  return total;
}

Tensor loss_smplx(const BodyParams& student, const BodyParams& teacher) {
  Tensor total;
  const std::pair<const Tensor*, const Tensor*> groups[] = {{&student.beta, &teacher.beta},
                                                            {&student.theta, &teacher.theta},
                                                            {&student.psi, &teacher.psi},
                                                            {&student.cam, &teacher.cam}};
  for (const auto& [s, t] : groups) {
    require_same("loss_smplx", *s, *t);
    total = accumulate(total, sum(square(sub(*s, t->to(s->dtype())))));
  }
  return total;
}

Tensor loss_distill(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher) {
  if (student.size() != teacher.size() || student.empty()) {
    throw DimensionError("loss_distill: traces hold " + std::to_string(student.size()) + " and " +
                         std::to_string(teacher.size()) + " layers");
  }
  Tensor total;
  for (std::size_t i = 0; i < student.size(); ++i) {
    require_same("loss_distill", student[i], teacher[i]);
    total = accumulate(total, mse(student[i], teacher[i].detach().to(student[i].dtype())));
  }
  return scale(total, 1.0 / static_cast<double>(student.size()));
}

std::string LossReport::csv_header() { return "step,nvs,gs,pts,smplx,distill,total"; }

std::string LossReport::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(step), nvs, gs, pts,
                smplx, distill, total);
  return buf;
}

WeightedLoss loss_total(const LossTerms& terms, const LossWeights& weights, std::int64_t step) {
  weights.validate();
  WeightedLoss out;
  out.report.step = step;
  struct Entry {
    const char* name;
    const Tensor* term;
    double lambda;
    double* slot;
  };
  const Entry entries[] = {{"nvs", &terms.nvs, weights.nvs, &out.report.nvs},
                           {"gs", &terms.gs, weights.gs, &out.report.gs},
                           {"pts", &terms.pts, weights.pts, &out.report.pts},
                           {"smplx", &terms.smplx, weights.smplx, &out.report.smplx},
                           {"distill", &terms.distill, weights.distill, &out.report.distill}};
  for (const Entry& e : entries) {
    if (!e.term->defined()) {
      continue;
    }
    const double v = e.term->item();
    if (!std::isfinite(v)) {
      throw NumericError("loss term '" + std::string(e.name) + "' is " + std::to_string(v) + " at step " +
                         std::to_string(step));
    }
    *e.slot = v;
    out.total = accumulate(out.total, scale(*e.term, e.lambda));
  }
  if (!out.total.defined()) {
    out.total = Tensor::scalar(0.0);
  }
  out.report.total = out.total.item();
  return out;
}

}  // namespace cnvs
