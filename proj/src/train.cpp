#include "cnvs/train.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>

#include "cnvs/errors.hpp"
#include "cnvs/ops.hpp"
#include "cnvs/splat.hpp"

namespace cnvs {

namespace {

BodyParams body_to(const BodyParams& b, DType dtype) {
  return {b.beta.to(dtype), b.theta.to(dtype), b.psi.to(dtype), b.cam.to(dtype)};
}

const ViewSample* find_view(const IdentitySamples& id, int view) {
  for (const auto& v : id.views) {
    if (v.view == view) {
      return &v;
    }
  }
  return nullptr;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, const char* stem, std::int64_t step) {
  char name[64];
  std::snprintf(name, sizeof(name), "%s_%06lld.pmck", stem, static_cast<long long>(step));
  return dir / name;
}

class CsvLog {
 public:
  explicit CsvLog(const std::filesystem::path& path) : path_(path), out_(path, std::ios::trunc) {
    if (!out_) {
      throw IoError("cannot write " + path.string());
    }
    out_ << LossReport::csv_header() << '\n';
    out_.flush();
  }
  void add(const LossReport& r) {
    out_ << r.csv_row() << '\n';
    out_.flush();
    if (!out_) {
      throw IoError("write failed: " + path_.string());
    }
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw IoError("cannot create directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace

std::vector<Example> make_examples(const Dataset& data, const std::vector<int>& target_views, DType dtype) {
  std::vector<Example> out;
  for (const auto& id : data.identities) {
    const ViewSample* src = find_view(id, 0);
    if (src == nullptr) {
      throw ConfigError("identity " + std::to_string(id.identity) + " has no frontal view 0");
    }
    for (int v : target_views) {
      const ViewSample* tgt = find_view(id, v);
      if (tgt == nullptr) {
        throw ConfigError("identity " + std::to_string(id.identity) + " has no view " + std::to_string(v));
      }
      Example e;
      e.identity = id.identity;
      e.source_view = 0;
      e.target_view = v;
      e.input = {src->image.to(dtype), src->pose, tgt->pose};
      e.target_image = tgt->image.to(dtype);
      e.target_points = tgt->points.to(dtype);
      e.target_mask = tgt->mask.to(dtype);
      e.body = body_to(id.body, dtype);
      out.push_back(std::move(e));
    }
  }
  return out;
}

LossTerms supervised_terms(const ForwardResult& result, const Example& example, const LossWeights& weights) {
  LossTerms t;
  t.nvs = loss_nvs(result.image, example.target_image, weights);
  t.gs = loss_gs(splat_render(result.gaussians, example.input.target_pose).image, example.target_image, weights);
  if (result.points.points.defined()) {
    t.pts = loss_pts(result.points, example.target_points, example.target_mask, weights);
  }
  if (result.body.beta.defined()) {
    t.smplx = loss_smplx(result.body, example.body);
  }
  return t;
}

BatchSampler::BatchSampler(std::size_t count, int batch, std::uint64_t seed) : batch_(batch), state_(seed) {
  if (count == 0 || batch < 1) {
    throw ConfigError("batch sampler needs at least one example and a positive batch size");
  }
  order_.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    order_[i] = i;
  }
  cursor_ = count;  // shuffle on first use
}

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> out;
  while (static_cast<int>(out.size()) < batch_) {
    if (cursor_ == order_.size()) {
      std::mt19937_64 rng(state_++);
      std::shuffle(order_.begin(), order_.end(), rng);
      cursor_ = 0;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

AdamW teacher_optimizer(const ModelState& model, const RunConfig& config) {
  AdamWConfig opt;
  opt.weight_decay = config.weight_decay;
  const auto steps = std::max<std::int64_t>(config.steps, 1);
  return AdamW({{model.backbone_params(), LrSchedule::cosine(config.backbone_rate, config.min_rate, steps)},
                {model.head_params(), LrSchedule::cosine(config.head_rate, config.min_rate, steps)}},
               opt);
}

namespace {

// Batch-mean of the weighted objective; gradients accumulate into the leaves.
LossReport accumulate_batch(const std::vector<const Example*>& batch, const LossWeights& weights, std::int64_t step,
                            const std::function<LossTerms(const Example&)>& terms_of) {
  LossReport mean;
  mean.step = step;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const Example* ex : batch) {
    const WeightedLoss w = loss_total(terms_of(*ex), weights, step);
    scale(w.total, inv).backward();
    mean.nvs += inv * w.report.nvs;
    mean.gs += inv * w.report.gs;
    mean.pts += inv * w.report.pts;
    mean.smplx += inv * w.report.smplx;
    mean.distill += inv * w.report.distill;
    mean.total += inv * w.report.total;
  }
  return mean;
}

}  // namespace

ModelState train_teacher(const RunConfig& config, const Dataset& data, const TrainPaths& paths,
                         const ReportHook& hook) {
  config.validate();
  ensure_dir(paths.out_dir);
  const auto examples = make_examples(data, config.train_view_indices(), config.model.dtype);
  ModelState model = ModelState::init(config.model, config.seed);
  AdamW optimizer = teacher_optimizer(model, config);
  BatchSampler sampler(examples.size(), config.batch, config.seed ^ 0x5EEDULL);
  CsvLog log(paths.out_dir / paths.loss_csv);
  for (std::int64_t step = 1; step <= config.steps; ++step) {
    std::vector<const Example*> batch;
    for (auto i : sampler.next()) {
      batch.push_back(&examples[i]);
    }
    const LossReport report = accumulate_batch(batch, config.weights, step, [&](const Example& ex) {
      return supervised_terms(forward(model, ex.input), ex, config.weights);
    });
    optimizer.step();
    log.add(report);
    if (hook) {
      hook(report);
    }
    if (step % config.checkpoint_every == 0) {
      save_model(checkpoint_path(paths.out_dir, "teacher", step), model);
    }
  }
  save_model(paths.out_dir / paths.final_name, model);
  return model;
}

DistillRun start_distill(const ModelState& teacher, const RunConfig& config) {
  StitchSchedule schedule = StitchSchedule::for_config(teacher.config, config.stitch_period);
  schedule.trace_layers = config.effective_trace_layers();
  schedule.validate();
  if (teacher.layout != AttnLayout::all_full(teacher.config.layers(), teacher.config.group_size)) {
    throw ScheduleError("the teacher must use full attention in every layer");
  }
  ModelState student = teacher.clone();
  AdamWConfig opt;
  opt.weight_decay = config.weight_decay;
  AdamW optimizer({{student.all_params(), LrSchedule::constant(config.distill_rate)}}, opt);
  return {teacher, std::move(student), schedule, std::move(optimizer), 0};
}

LossReport distill_step(DistillRun& run, const std::vector<const Example*>& batch, const LossWeights& weights) {
  const AttnLayout layout = layout_at(run.step, run.schedule);
  if (layout != run.student.layout) {
    stitch(run.student, layout);
  }
  ForwardOptions opts;
  opts.trace_layers = run.schedule.trace_layers;
  const LossReport report = accumulate_batch(batch, weights, run.step, [&](const Example& ex) {
    std::vector<Tensor> teacher_trace;
    {
      NoGradGuard guard;
      teacher_trace = forward(run.teacher, ex.input, opts).trace;
    }
    const ForwardResult student = forward(run.student, ex.input, opts);
    LossTerms terms = supervised_terms(student, ex, weights);
    terms.distill = loss_distill(student.trace, teacher_trace);
    return terms;
  });
  run.optimizer.step();
  ++run.step;
  return report;
}

double distill_gap(const DistillRun& run, const std::vector<Example>& examples) {
  if (examples.empty()) {
    throw ContractError("distill_gap needs at least one example");
  }
  NoGradGuard guard;
  ForwardOptions opts;
  opts.trace_layers = run.schedule.trace_layers;
  double sum = 0.0;
  for (const auto& ex : examples) {
    sum += loss_distill(forward(run.student, ex.input, opts).trace, forward(run.teacher, ex.input, opts).trace).item();
  }
  return sum / static_cast<double>(examples.size());
}

ModelState run_distill(const ModelState& teacher, const RunConfig& config, const Dataset& data,
                       const DistillPaths& paths, const ReportHook& hook) {
  config.validate();
  ensure_dir(paths.out_dir);
  const auto examples = make_examples(data, config.train_view_indices(), teacher.config.dtype);
  DistillRun run = start_distill(teacher, config);
  write_text(paths.out_dir / paths.audit, schedule_audit(run.schedule));
  BatchSampler sampler(examples.size(), config.batch, config.seed ^ 0xD157ULL);
  CsvLog log(paths.out_dir / paths.loss_csv);
  while (run.step < config.distill_steps) {
    std::vector<const Example*> batch;
    for (auto i : sampler.next()) {
      batch.push_back(&examples[i]);
    }
    const LossReport report = distill_step(run, batch, config.weights);
    log.add(report);
    if (hook) {
      hook(report);
    }
    if (run.step % config.distill_checkpoint_every == 0) {
      save_model(checkpoint_path(paths.out_dir, "student", run.step), run.student);
    }
  }
  // Saved under the layout in force at the final step count.
  stitch(run.student, layout_at(run.step, run.schedule));
  save_model(paths.out_dir / paths.final_name, run.student);
  return run.student;
}

ForwardResult render_view(const ModelState& model, const Tensor& source_image, const CameraPose& source_pose,
                          const CameraPose& target_pose) {
  NoGradGuard guard;
  return forward(model, {source_image.to(model.config.dtype), source_pose, target_pose});
}

MetricReport evaluate(const ModelState& model, const Dataset& data, const std::vector<int>& views) {
  MetricReport report;
  for (const auto& ex : make_examples(data, views, model.config.dtype)) {
    const ForwardResult r = render_view(model, ex.input.source_image, ex.input.source_pose, ex.input.target_pose);
    report.views.push_back({ex.identity, ex.target_view, psnr(r.image, ex.target_image), ssim(r.image, ex.target_image)});
  }
  report.finalize();
  return report;
}

}  // namespace cnvs
