#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cnvs/attention.hpp"
#include "cnvs/model.hpp"

namespace cnvs {

/// Progressive Full -> Linear conversion plan. Event e (1-based, at step e * period) converts
/// the first g - 1 layers of group e - 1; the last layer of every group stays Full.
struct StitchSchedule {
  int layers = 36;
  int group_size = 6;
  std::int64_t period = 5000;
  std::vector<int> trace_layers{5, 11, 17, 23, 29, 35};

  static StitchSchedule for_config(const CascadeConfig& config, std::int64_t period = 5000);
  /// Throws ConfigError on a non-positive period, layers not divisible by g, or a trace
  /// layer outside [0, layers).
  void validate() const;
  int events() const { return layers / group_size; }
  /// First step at which the final layout is in force.
  std::int64_t completion_step() const { return period * events(); }
  /// Layers converted by event e (1-based).
  std::vector<int> event_layers(int event) const;
  /// Number of events that have fired at `step`.
  int events_at(std::int64_t step) const;
};

/// Layout in force at `step`. Throws ContractError for a negative step.
AttnLayout layout_at(std::int64_t step, const StitchSchedule& schedule);

/// Swaps attention kernels in place. Only Full -> Linear flips are allowed; projections are
/// reused as they are. Throws ScheduleError on a Linear -> Full flip or a layer-count mismatch.
void stitch(ModelState& student, const AttnLayout& layout);

/// Audit text: header `step_event,group,converted_layers`, one line per event, with the
/// converted layer indices separated by ';'.
std::string schedule_audit(const StitchSchedule& schedule);

/// SHA-256 over the serialized parameters. The config and layout entries are left out, so a
/// kernel swap keeps the hash.
std::string parameter_hash(const ModelState& state);

}  // namespace cnvs
