// End-to-end acceptance checks. One PASS/FAIL line per criterion; exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "CLI11.hpp"
#include "cnvs/attention.hpp"
#include "cnvs/camera.hpp"
#include "cnvs/config.hpp"
#include "cnvs/losses.hpp"
#include "cnvs/metrics.hpp"
#include "cnvs/ops.hpp"
#include "cnvs/schedule.hpp"
#include "cnvs/synth.hpp"
#include "cnvs/train.hpp"
#include "grad_suite.hpp"

namespace fs = std::filesystem;
using namespace cnvs;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

// ---- 1: gradient suite

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name, failed;
  int count = 0;
  for (const auto& c : testing::grad_cases()) {
    const double e = c.run();
    ++count;
    if (!(e < 1e-4)) {
      failed += " " + c.name;
    }
    if (!(e <= worst)) {
      worst = e;
      worst_name = c.name;
    }
  }
  const double secs = seconds_since(t0);
  return {failed.empty() && secs < 120.0,
          fmt("%d cases, max rel err %.2e (%s) < 1e-4, %.1f s < 120 s%s", count, worst, worst_name.c_str(), secs,
              failed.empty() ? "" : (" failing:" + failed).c_str())};
}

// ---- 2: linear attention against the explicit pairwise kernel weights

double phi(double x) { return x > 0 ? x + 1.0 : std::exp(x); }

std::vector<double> pairwise_linear(const std::vector<double>& q, const std::vector<double>& k,
                                    const std::vector<double>& v, int n, int d, int heads) {
  const int dh = d / heads;
  std::vector<double> out(static_cast<std::size_t>(n * d), 0.0);
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < n; ++i) {
      double den = 0.0;
      std::vector<double> num(static_cast<std::size_t>(dh), 0.0);
      for (int j = 0; j < n; ++j) {
        double w = 0.0;
        for (int c = 0; c < dh; ++c) {
          w += phi(q[i * d + h * dh + c]) * phi(k[j * d + h * dh + c]);
        }
        den += w;
        for (int c = 0; c < dh; ++c) {
          num[c] += w * v[j * d + h * dh + c];
        }
      }
      for (int c = 0; c < dh; ++c) {
        out[i * d + h * dh + c] = num[c] / den;
      }
    }
  }
  return out;
}

Outcome linear_equivalence() {
  Rng rng(21);
  double worst = 0.0;
  for (int n : {4, 16, 64}) {
    for (int heads : {1, 4}) {
      const Tensor q = normal_tensor({n, 16}, 1.0, rng, DType::f64);
      const Tensor k = normal_tensor({n, 16}, 1.0, rng, DType::f64);
      const Tensor v = normal_tensor({n, 16}, 1.0, rng, DType::f64);
      const auto got = linear_attention(q, k, v, heads).to_vector();
      const auto want = pairwise_linear(q.to_vector(), k.to_vector(), v.to_vector(), n, 16, heads);
      for (std::size_t i = 0; i < got.size(); ++i) {
        worst = std::max(worst, std::abs(got[i] - want[i]) / std::max(std::abs(want[i]), 1e-3));
      }
    }
  }
  const Tensor x = normal_tensor({1, 16}, 1.0, rng, DType::f64);
  const Tensor v = normal_tensor({1, 16}, 1.0, rng, DType::f64);
  // One token: the weight cancels, leaving V up to the rounding of w * v / w.
  const auto one = linear_attention(x, x, v, 4, LinearNorm::normalized, 0.0).to_vector();
  const auto vv = v.to_vector();
  double single = 0.0;
  for (std::size_t i = 0; i < vv.size(); ++i) {
    single = std::max(single, std::abs(one[i] - vv[i]));
  }
  return {worst < 1e-5 && single < 1e-14,
          fmt("max rel err %.2e < 1e-5 over n in {4,16,64}; single token |out - V| = %.1e (< 1e-14)", worst, single)};
}

// ---- 3: attention time scaling

Outcome complexity() {
  const auto t0 = Clock::now();
  const std::vector<std::int64_t> ns{512, 1024, 2048, 4096};
  const auto full = bench_scaling(AttnKind::full, ns, 256, 8, 3);
  const auto lin = bench_scaling(AttnKind::linear, ns, 256, 8, 3);
  bool ok = true;
  std::string ratios;
  for (std::size_t i = 1; i < ns.size(); ++i) {
    const double rf = full[i].mean_s / full[i - 1].mean_s, rl = lin[i].mean_s / lin[i - 1].mean_s;
    ok = ok && rf > 3.0 && rl < 2.6;
    ratios += fmt(" %lld:%.2f/%.2f", static_cast<long long>(ns[i]), rf, rl);
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 300.0,
          fmt("time(2n)/time(n) full/linear:%s (full > 3.0, linear < 2.6), %.1f s < 300 s", ratios.c_str(), secs)};
}

// ---- 4: fresh injection is the identity

CameraPose view_at(double yaw_deg, double pitch_deg, int size) { return orbit_camera(yaw_deg, pitch_deg, size, size); }

Outcome zero_init_identity(const RunConfig& micro) {
  const ModelState s = ModelState::init(micro.model, 31);
  ForwardOptions ablate;
  ablate.ablate_priors = true;
  Rng rng(32);
  std::uniform_real_distribution<double> angle(-30.0, 30.0);
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    const ForwardInput in{uniform_tensor({micro.model.height, micro.model.width, 3}, 0.0, 1.0, rng, micro.model.dtype),
                          view_at(0.0, 0.0, micro.model.width), view_at(angle(rng), angle(rng), micro.model.width)};
    NoGradGuard guard;
    const ForwardResult a = forward(s, in), b = forward(s, in, ablate);
    for (const auto& [x, y] : {std::pair{a.image, b.image}, std::pair{a.gaussians.means, b.gaussians.means},
                               std::pair{a.t_out, b.t_out}}) {
      const auto u = x.to_vector(), w = y.to_vector();
      for (std::size_t j = 0; j < u.size(); ++j) {
        worst = std::max(worst, std::abs(u[j] - w[j]));
      }
    }
  }
  return {worst < 1e-6, fmt("max |with priors - ablated| = %.2e < 1e-6 over 10 inputs", worst)};
}

// ---- 5: stitch schedule law

Outcome schedule_law() {
  const StitchSchedule s;
  std::set<int> previous;
  bool monotone = true, law = true;
  for (std::int64_t step = 0; step <= 40000; ++step) {
    const AttnLayout l = layout_at(step, s);
    const auto lin = l.indices_of(AttnKind::linear);
    const std::set<int> now(lin.begin(), lin.end());
    monotone = monotone && std::includes(now.begin(), now.end(), previous.begin(), previous.end());
    // Direct restatement: group e (0-based) turns its first five layers linear at (e+1)*period.
    for (int layer = 0; layer < 36; ++layer) {
      const bool want = layer % 6 != 5 && step >= static_cast<std::int64_t>(layer / 6 + 1) * 5000;
      law = law && (now.count(layer) == 1) == want;
    }
    previous = now;
  }
  const AttnLayout done = layout_at(40000, s);
  const bool final_ok = done.count(AttnKind::linear) == 30 && done.count(AttnKind::full) == 6 &&
                        done.indices_of(AttnKind::full) == std::vector<int>{5, 11, 17, 23, 29, 35};
  return {monotone && law && final_ok,
          fmt("final %d linear / %d full, layout %s; monotone over 0..40000: %s; matches event law: %s",
              done.count(AttnKind::linear), done.count(AttnKind::full), done.to_string().c_str(),
              monotone ? "yes" : "no", law ? "yes" : "no")};
}

// ---- 6: Plücker invariants

Outcome plucker_invariants() {
  Rng rng(61);
  std::uniform_real_distribution<double> angle(-30.0, 30.0), unit(0.0, 1.0);
  double worst_dot = 0.0, worst_shift = 0.0;
  int checked = 0;
  for (int cam = 0; cam < 10; ++cam) {
    const int w = 32 + 16 * (cam % 3), h = 32 + 16 * ((cam + 1) % 3);
    CameraPose pose = orbit_camera(angle(rng), angle(rng), w, h);
    pose.fx *= 0.8 + 0.4 * unit(rng);
    pose.fy = pose.fx;
    const Tensor map = plucker_map(pose, DType::f64);
    const Eigen::Vector3d c = pose.center();
    for (int i = 0; i < 1000; ++i) {
      const int u = static_cast<int>(unit(rng) * w) % w, v = static_cast<int>(unit(rng) * h) % h;
      const std::int64_t base = (static_cast<std::int64_t>(v) * w + u) * 6;
      const Eigen::Vector3d d(map.at(base), map.at(base + 1), map.at(base + 2));
      const Eigen::Vector3d m(map.at(base + 3), map.at(base + 4), map.at(base + 5));
      worst_dot = std::max(worst_dot, std::abs(d.dot(m)));
      const Eigen::Vector3d p = c + (10.0 * unit(rng) - 5.0) * d;
      worst_shift = std::max(worst_shift, (p.cross(d) - m).norm());
      ++checked;
    }
  }
  return {worst_dot < 1e-6 && worst_shift < 1e-6,
          fmt("%d pixels: max |d.m| = %.2e, max moment change under shift = %.2e (< 1e-6)", checked, worst_dot,
              worst_shift)};
}

// ---- 7: ground-truth point maps

Outcome point_map_consistency() {
  double worst_px = 0.0, worst_m = 0.0;
  int points = 0, shared = 0;
  for (std::uint64_t id = 0; id < 2; ++id) {
    const SyntheticScene scene = SyntheticScene::random(700 + id);
    const auto cams = sample_cameras(700 + id, 8);
    for (std::size_t a = 0; a < cams.size(); ++a) {
      const auto& ca = cams[a];
      const auto& cb = cams[(a + 3) % cams.size()];
      const GroundTruthView gt = render_gt(scene, ca, DType::f64);
      for (int v = 0; v < ca.height; ++v) {
        for (int u = 0; u < ca.width; ++u) {
          const std::int64_t p = static_cast<std::int64_t>(v) * ca.width + u;
          if (gt.mask.at(p) < 0.5) {
            continue;
          }
          ++points;
          const Eigen::Vector3d x(gt.points.at(p * 3), gt.points.at(p * 3 + 1), gt.points.at(p * 3 + 2));
          const auto px = ca.project_camera(x);
          worst_px = px ? std::max(worst_px, (*px - Eigen::Vector2d(u + 0.5, v + 0.5)).norm()) : 1e9;
          const Eigen::Vector3d w = ca.to_world(x);
          const auto hit = intersect_scene(scene, cb.center(), (w - cb.center()).normalized());
          if (hit && std::abs(hit->t - (w - cb.center()).norm()) < 1e-6) {
            ++shared;
            worst_m = std::max(worst_m, (hit->point - w).norm());
          }
        }
      }
    }
  }
  return {points > 0 && shared > points / 4 && worst_px < 1e-3 && worst_m < 1e-4,
          fmt("%d points: max reprojection %.2e px < 1e-3; %d seen by a second view, max disagreement %.2e m < 1e-4",
              points, worst_px, shared, worst_m)};
}

// ---- 10: loss arithmetic

Outcome loss_arithmetic() {
  const LossWeights lw;
  const Tensor one = Tensor::scalar(1.0, DType::f64);
  const double unit = loss_total({one, one, one, one, {}}, lw).report.total;
  // Linearity probe: moving only the point term by delta moves the total by 100 * delta.
  const double base = loss_total({one, one, Tensor::scalar(0.25, DType::f64), one, {}}, lw).report.total;
  const double probe = loss_total({one, one, Tensor::scalar(0.75, DType::f64), one, {}}, lw).report.total;
  const double slope = (probe - base) / 0.5;
  return {unit == 103.0 && std::abs(slope - 100.0) < 1e-9,
          fmt("unit terms total %.17g (== 103); point-term slope %.12g (== 100)", unit, slope)};
}

// ---- 11: metric oracles

Outcome metric_oracles() {
  Rng rng(111);
  const Tensor a = uniform_tensor({32, 32, 3}, 0.0, 0.9, rng, DType::f64);
  auto shifted = a.to_vector();
  for (auto& x : shifted) {
    x += 0.1;
  }
  const double p = psnr(a, Tensor::from(a.shape(), shifted, DType::f64));
  const double s = ssim(a, a);
  return {std::abs(p - 20.0) < 1e-6 && std::abs(s - 1.0) < 1e-9,
          fmt("PSNR at offset 0.1 = %.12f dB (20 +- 1e-6); SSIM(a,a) = %.15f (1 +- 1e-9)", p, s)};
}

// ---- 8, 9, 12: micro training runs

struct MicroRun {
  RunConfig config;
  fs::path work;
  Dataset data;
  ModelState teacher;
  std::vector<LossReport> teacher_log;
  double teacher_secs = 0.0;
};

double total_at(const std::vector<LossReport>& log, std::int64_t step) {
  for (const auto& r : log) {
    if (r.step == step) {
      return r.total;
    }
  }
  return std::nan("");
}

Outcome micro_overfit(MicroRun& run) {
  const auto t0 = Clock::now();
  run.teacher = train_teacher(run.config, run.data, {run.work / "teacher"},
                              [&](const LossReport& r) { run.teacher_log.push_back(r); });
  run.teacher_secs = seconds_since(t0);
  const MetricReport train = evaluate(run.teacher, run.data, run.config.train_view_indices());
  const double l50 = total_at(run.teacher_log, 50), lend = total_at(run.teacher_log, run.config.steps);
  const bool loss_ok = lend < 0.2 * l50;
  return {train.mean_psnr >= 24.0 && run.teacher_secs < 1800.0 && loss_ok,
          fmt("train-view PSNR %.2f dB (>= 24) after %lld steps, %.0f s (< 1800 s); total loss step %lld %.4g < 0.2 x "
              "step 50 %.4g",
              train.mean_psnr, static_cast<long long>(run.config.steps), run.teacher_secs,
              static_cast<long long>(run.config.steps), lend, l50)};
}

Outcome distillation_fidelity(MicroRun& run) {
  const RunConfig& c = run.config;
  const auto examples = make_examples(run.data, c.train_view_indices(), c.model.dtype);
  DistillRun d = start_distill(run.teacher, c);
  const int events = d.schedule.events();
  const std::int64_t period = d.schedule.period;
  BatchSampler sampler(examples.size(), c.batch, c.seed ^ 0xD157ULL);

  // L_distill over every training example right after each stitch and one period later.
  std::vector<double> after(static_cast<std::size_t>(events) + 1), later(after.size());
  for (std::int64_t step = 0; step <= (events + 1) * period; ++step) {
    if (step > 0 && step % period == 0) {
      const auto e = static_cast<std::size_t>(step / period);
      if (e >= 2) {
        later[e - 1] = distill_gap(d, examples);
      }
      if (e <= static_cast<std::size_t>(events)) {
        stitch(d.student, layout_at(step, d.schedule));
        after[e] = distill_gap(d, examples);
      }
    }
    if (step == (events + 1) * period) {
      break;
    }
    std::vector<const Example*> batch;
    for (auto i : sampler.next()) {
      batch.push_back(&examples[i]);
    }
    distill_step(d, batch, c.weights);
  }
  save_model(run.work / "student.pmck", d.student);

  bool decays = true;
  std::string drops;
  for (int e = 1; e <= events; ++e) {
    const double first = after[static_cast<std::size_t>(e)], last = later[static_cast<std::size_t>(e)];
    decays = decays && last <= 0.8 * first;
    drops += fmt(" %.0f%%", 100.0 * (1.0 - last / first));
  }

  const auto held = c.heldout_view_indices();
  const MetricReport t = evaluate(run.teacher, run.data, held);
  const MetricReport s = evaluate(d.student, run.data, held);
  const bool layout_ok = d.student.layout.count(AttnKind::linear) == 30 &&
                         d.student.layout.indices_of(AttnKind::full) == std::vector<int>{5, 11, 17, 23, 29, 35};
  return {layout_ok && s.mean_psnr >= t.mean_psnr - 1.5 && decays,
          fmt("student %s; held-out PSNR student %.2f vs teacher %.2f dB (gap <= 1.5); L_distill drop per event:%s "
              "(each >= 20%%)",
              d.student.layout.to_string().c_str(), s.mean_psnr, t.mean_psnr, drops.c_str())};
}

Outcome determinism(const MicroRun& run) {
  const fs::path ck = run.work / "roundtrip.pmck";
  save_model(ck, run.teacher);
  const ModelState loaded = load_model(ck);
  const auto& v0 = run.data.identities[0].views[0];
  const auto& v5 = run.data.identities[0].views[5];
  const bool forward_same = render_view(loaded, v0.image, v0.pose, v5.pose).image.to_vector() ==
                            render_view(run.teacher, v0.image, v0.pose, v5.pose).image.to_vector();

  DatasetConfig dc = run.config.data;
  dc.identities = 2;
  const Manifest a = make_dataset(dc, run.work / "gen_a");
  const Manifest b = make_dataset(dc, run.work / "gen_b");
  bool same = a.entries.size() == b.entries.size();
  for (std::size_t i = 0; same && i < a.entries.size(); ++i) {
    same = a.entries[i].sha256 == b.entries[i].sha256 && a.entries[i].path == b.entries[i].path;
  }
  return {forward_same && same,
          fmt("checkpoint round trip forward bitwise identical: %s; two same-seed generations, %zu checksums "
              "identical: %s",
              forward_same ? "yes" : "no", a.entries.size(), same ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string config_path = CNVS_MICRO_CONFIG;
  std::string work = (fs::temp_directory_path() / "cnvs_acceptance").string();
  std::vector<int> only;
  app.add_option("--config", config_path, "micro profile used by the training criteria");
  app.add_option("--work", work, "scratch directory");
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const RunConfig micro = RunConfig::load(config_path);
  const auto wanted = [&](int id) { return only.empty() || std::count(only.begin(), only.end(), id) > 0; };

  MicroRun run;
  run.config = micro;
  run.work = work;
  std::optional<Outcome> teacher_outcome;
  // The teacher is trained once and shared by criteria 8, 9 and 12.
  const auto teacher = [&]() -> Outcome {
    if (!teacher_outcome) {
      fs::remove_all(run.work);
      make_dataset(micro.data, run.work / "data");
      run.data = load_dataset(run.work / "data" / "manifest.csv", micro.model.dtype);
      teacher_outcome = micro_overfit(run);
    }
    return *teacher_outcome;
  };

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> check;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient suite", gradient_suite},
      {2, "linear attention equivalence", linear_equivalence},
      {3, "complexity", complexity},
      {4, "zero-init identity", [&] { return zero_init_identity(micro); }},
      {5, "schedule law", schedule_law},
      {6, "Plucker invariants", plucker_invariants},
      {7, "point-map consistency", point_map_consistency},
      {8, "micro overfit", teacher},
      {9, "distillation fidelity", [&] { teacher(); return distillation_fidelity(run); }},
      {10, "loss arithmetic", loss_arithmetic},
      {11, "metric oracles", metric_oracles},
      {12, "determinism and persistence", [&] { teacher(); return determinism(run); }},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!wanted(c.id)) {
      continue;
    }
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s  C%-2d %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d failing\n", failures);
  return failures == 0 ? 0 : 1;
}
