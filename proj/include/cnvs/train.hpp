#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cnvs/config.hpp"
#include "cnvs/losses.hpp"
#include "cnvs/metrics.hpp"
#include "cnvs/model.hpp"
#include "cnvs/optim.hpp"
#include "cnvs/schedule.hpp"
#include "cnvs/synth.hpp"

namespace cnvs {

/// One supervised pair: the frontal view of an identity as input, another view as target.
struct Example {
  int identity = 0;
  int source_view = 0;
  int target_view = 0;
  ForwardInput input;
  Tensor target_image;   // [H x W x 3]
  Tensor target_points;  // [H x W x 3], target camera frame
  Tensor target_mask;    // [H x W x 1]
  BodyParams body;       // ground truth, model dtype
};

/// Pairs (view 0 -> v) for every identity and every listed target view. Throws ConfigError
/// when a requested view is missing.
std::vector<Example> make_examples(const Dataset& data, const std::vector<int>& target_views, DType dtype);

/// L_nvs, L_gs, L_pts and L_smplx of one forward pass. Prior-branch terms are absent when the
/// branch was ablated.
LossTerms supervised_terms(const ForwardResult& result, const Example& example, const LossWeights& weights);

/// Deterministic epoch-shuffled batches of example indices.
class BatchSampler {
 public:
  BatchSampler(std::size_t count, int batch, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  int batch_;
  std::uint64_t state_;
};

using ReportHook = std::function<void(const LossReport&)>;

struct TrainPaths {
  std::filesystem::path out_dir;
  std::string loss_csv = "loss.csv";
  std::string final_name = "teacher.pmck";
};

/// Decoupled AdamW: backbone (tokenizer and blocks) and everything else each follow a cosine
/// decay from their own rate to `min_rate` over `steps`.
AdamW teacher_optimizer(const ModelState& model, const RunConfig& config);

/// Trains a fresh all-Full model for `config.steps` steps. Writes the loss CSV (one row per
/// step), a checkpoint every `checkpoint_every` steps and the final checkpoint. Throws
/// NumericError naming the step and term on a non-finite loss; rows up to that step are kept.
ModelState train_teacher(const RunConfig& config, const Dataset& data, const TrainPaths& paths,
                         const ReportHook& hook = {});

struct DistillRun {
  ModelState teacher;  // frozen, all-Full
  ModelState student;
  StitchSchedule schedule;
  AdamW optimizer;
  std::int64_t step = 0;
};

/// Student starts as an exact copy of the teacher; constant-rate AdamW over every parameter.
DistillRun start_distill(const ModelState& teacher, const RunConfig& config);

/// Applies the layout in force at the run's step (stitching when it changed), then one update on
/// L_total + lambda_distill L_distill. The teacher runs without gradient recording.
LossReport distill_step(DistillRun& run, const std::vector<const Example*>& batch, const LossWeights& weights);

/// Mean unweighted L_distill over `examples` with the student's current layout. Records no graph
/// and changes nothing.
double distill_gap(const DistillRun& run, const std::vector<Example>& examples);

struct DistillPaths {
  std::filesystem::path out_dir;
  std::string loss_csv = "distill_loss.csv";
  std::string audit = "schedule_audit.csv";
  std::string final_name = "student.pmck";
};

/// Full distillation: `config.distill_steps` steps under the stitch schedule. Writes the loss CSV,
/// the schedule audit, run checkpoints every `distill_checkpoint_every` steps and the final
/// student. Returns the final student.
ModelState run_distill(const ModelState& teacher, const RunConfig& config, const Dataset& data,
                       const DistillPaths& paths, const ReportHook& hook = {});

/// Renders every listed view of every identity from its frontal source and scores it.
MetricReport evaluate(const ModelState& model, const Dataset& data, const std::vector<int>& views);

/// One forward pass without gradient recording.
ForwardResult render_view(const ModelState& model, const Tensor& source_image, const CameraPose& source_pose,
                          const CameraPose& target_pose);

}  // namespace cnvs
