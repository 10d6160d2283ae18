// Command-line driver: data generation, training, distillation, evaluation, benchmarks, rendering.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cnvs/config.hpp"
#include "cnvs/errors.hpp"
#include "cnvs/image_io.hpp"
#include "cnvs/splat.hpp"
#include "cnvs/train.hpp"

namespace fs = std::filesystem;
using namespace cnvs;

namespace {

enum Exit { kOk = 0, kIo = 2, kNumeric = 3, kSchedule = 4 };

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", path, "key = value config file");
    cmd->add_option("--set", overrides, "override one key, e.g. --set steps=100")->take_all();
  }
  RunConfig load() const {
    RunConfig c = path.empty() ? RunConfig{} : RunConfig::load(path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("--set expects key=value, got '" + kv + "'");
      }
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    c.validate();
    return c;
  }
};

fs::path manifest_of(const std::string& data) {
  const fs::path p(data);
  return fs::is_directory(p) ? p / "manifest.csv" : p;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void print_progress(const LossReport& r, std::int64_t total) {
  if (r.step == 1 || r.step % 50 == 0 || r.step == total) {
    std::fprintf(stderr, "step %lld/%lld  total %.5g  nvs %.4g  gs %.4g  pts %.4g  smplx %.4g  distill %.4g\n",
                 static_cast<long long>(r.step), static_cast<long long>(total), r.total, r.nvs, r.gs, r.pts, r.smplx,
                 r.distill);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feed-forward human novel view synthesis: data, training, distillation and evaluation"};
  app.require_subcommand(0, 1);
  bool dump_config = false;
  ConfigArgs dump_args;
  app.add_flag("--dump-config", dump_config, "print the effective configuration with [paper]/[artifact] tags");
  dump_args.add_to(&app);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "render the synthetic dataset and its manifest");
  ConfigArgs gen_cfg;
  gen_cfg.add_to(gen);
  std::string gen_out;
  std::optional<std::uint64_t> gen_seed;
  bool paper_views = false;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_flag("--paper-views", paper_views, "105 views per identity instead of the configured count");

  // train-teacher
  auto* train = app.add_subcommand("train-teacher", "train the all-full-attention model");
  ConfigArgs train_cfg;
  train_cfg.add_to(train);
  std::string train_data, train_out;
  train->add_option("--data", train_data, "dataset directory or manifest")->required();
  train->add_option("--out", train_out, "output directory")->required();

  // distill
  auto* distill = app.add_subcommand("distill", "progressively stitch linear attention into a student");
  ConfigArgs distill_cfg;
  distill_cfg.add_to(distill);
  std::string teacher_path, distill_data, distill_out;
  distill->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  distill->add_option("--data", distill_data, "dataset directory or manifest")->required();
  distill->add_option("--out", distill_out, "output directory")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "PSNR/SSIM of rendered views against ground truth");
  ConfigArgs eval_cfg;
  eval_cfg.add_to(eval);
  std::string eval_ckpt, eval_data, eval_out, eval_split = "heldout";
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  eval->add_option("--data", eval_data, "dataset directory or manifest")->required();
  eval->add_option("--out", eval_out, "metrics CSV path")->required();
  eval->add_option("--views", eval_split, "heldout, train or all")->check(CLI::IsMember({"heldout", "train", "all"}));

  // bench-attn
  auto* bench = app.add_subcommand("bench-attn", "time full and linear attention over sequence lengths");
  std::vector<std::int64_t> n_list{512, 1024, 2048, 4096};
  std::int64_t bench_d = 256;
  int bench_heads = 8, repeats = 3;
  std::string bench_out;
  bench->add_option("--n-list", n_list, "sequence lengths")->delimiter(',');
  bench->add_option("--d", bench_d, "token width");
  bench->add_option("--heads", bench_heads, "attention heads");
  bench->add_option("--repeats", repeats, "timed repetitions per point");
  bench->add_option("--out", bench_out, "CSV path (stdout when omitted)");

  // render
  auto* render = app.add_subcommand("render", "synthesize one target view from a source image");
  std::string r_ckpt, r_image, r_src_pose, r_tgt_pose, r_out, r_gs_out;
  render->add_option("--checkpoint", r_ckpt, "model checkpoint")->required();
  render->add_option("--source-image", r_image, "source PPM")->required();
  render->add_option("--source-pose", r_src_pose, "source pose record")->required();
  render->add_option("--target-pose", r_tgt_pose, "target pose record")->required();
  render->add_option("--out", r_out, "output PPM")->required();
  render->add_option("--gs-out", r_gs_out, "also write the gaussian-splat render here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kIo;
  }

  std::optional<LossReport> last;
  try {
    if (dump_config) {
      std::cout << dump_args.load().dump();
      return kOk;
    }
    if (*gen) {
      RunConfig c = gen_cfg.load();
      if (gen_seed) {
        c.data.seed = *gen_seed;
      }
      if (paper_views) {
        c.data.views = 105;
      }
      const Manifest m = make_dataset(c.data, gen_out);
      std::cout << (fs::path(gen_out) / "manifest.csv").string() << '\n'
                << m.sample_count() << " samples (" << c.data.identities << " identities x " << c.data.views
                << " views), " << m.entries.size() << " files\n";
      return kOk;
    }
    if (*train) {
      const RunConfig c = train_cfg.load();
      const Dataset data = load_dataset(manifest_of(train_data), c.model.dtype);
      fs::create_directories(train_out);
      write_text(fs::path(train_out) / "config.txt", c.dump());
      train_teacher(c, data, {train_out}, [&](const LossReport& r) {
        last = r;
        print_progress(r, c.steps);
      });
      std::cout << (fs::path(train_out) / "teacher.pmck").string() << '\n';
      return kOk;
    }
    if (*distill) {
      const RunConfig c = distill_cfg.load();
      const ModelState teacher = load_model(teacher_path);
      const Dataset data = load_dataset(manifest_of(distill_data), teacher.config.dtype);
      fs::create_directories(distill_out);
      write_text(fs::path(distill_out) / "config.txt", c.dump());
      const ModelState student = run_distill(teacher, c, data, {distill_out}, [&](const LossReport& r) {
        last = r;
        print_progress(r, c.distill_steps);
      });
      std::cout << (fs::path(distill_out) / "student.pmck").string() << '\n'
                << "layout " << student.layout.to_string() << '\n';
      return kOk;
    }
    if (*eval) {
      const RunConfig c = eval_cfg.load();
      const ModelState model = load_model(eval_ckpt);
      const Dataset data = load_dataset(manifest_of(eval_data), model.config.dtype);
      std::vector<int> views;
      if (eval_split == "train" || eval_split == "all") {
        views = c.train_view_indices();
      }
      if (eval_split == "heldout" || eval_split == "all") {
        for (int v : c.heldout_view_indices()) {
          views.push_back(v);
        }
      }
      const MetricReport report = evaluate(model, data, views);
      write_text(eval_out, report.csv());
      std::printf("%d views  PSNR %.3f dB  SSIM %.4f\n", report.count(), report.mean_psnr, report.mean_ssim);
      return kOk;
    }
    if (*bench) {
      std::string csv;
      bool header = true;
      for (AttnKind kind : {AttnKind::full, AttnKind::linear}) {
        csv += bench_csv(bench_scaling(kind, n_list, bench_d, bench_heads, repeats), header);
        header = false;
      }
      if (bench_out.empty()) {
        std::cout << csv;
      } else {
        write_text(bench_out, csv);
      }
      return kOk;
    }
    if (*render) {
      const ModelState model = load_model(r_ckpt);
      const Tensor image = read_ppm(r_image, model.config.dtype);
      const CameraPose src = read_pose_file(r_src_pose);
      const CameraPose tgt = read_pose_file(r_tgt_pose);
      const Eigen::Vector2d angles = view_angles(tgt);
      if (std::abs(angles.x()) > kFrustumHalfAngleDeg + 1e-6 || std::abs(angles.y()) > kFrustumHalfAngleDeg + 1e-6) {
        std::fprintf(stderr, "warning: target view (yaw %.1f, pitch %.1f deg) lies outside the +-30 degree frustum\n",
                     angles.x(), angles.y());
      }
      const ForwardResult r = render_view(model, image, src, tgt);
      write_ppm(r_out, r.image);
      if (!r_gs_out.empty()) {
        write_ppm(r_gs_out, splat_render(r.gaussians, tgt).image);
      }
      std::cout << r_out << '\n';
      return kOk;
    }
    std::cout << app.help();
    return kOk;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    if (last) {
      std::fprintf(stderr, "last report: %s\n%s\n", LossReport::csv_header().c_str(), last->csv_row().c_str());
    }
    return kNumeric;
  } catch (const ScheduleError& e) {
    std::fprintf(stderr, "schedule violation: %s\n", e.what());
    return kSchedule;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  }
}
