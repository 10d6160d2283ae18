#include "cnvs/schedule.hpp"

#include <sstream>

#include "cnvs/errors.hpp"
#include "cnvs/synth.hpp"

namespace cnvs {

StitchSchedule StitchSchedule::for_config(const CascadeConfig& config, std::int64_t period) {
  StitchSchedule s;
  s.layers = config.layers();
  s.group_size = config.group_size;
  s.period = period;
  s.trace_layers = config.trace_layers();
  return s;
}

void StitchSchedule::validate() const {
  if (period <= 0) {
    throw ConfigError("stitch period must be positive, got " + std::to_string(period));
  }
  if (group_size < 1 || layers < 1 || layers % group_size != 0) {
    throw ConfigError("stitch schedule: " + std::to_string(layers) + " layers do not split into groups of " +
                      std::to_string(group_size));
  }
  for (int l : trace_layers) {
    if (l < 0 || l >= layers) {
      throw ConfigError("trace layer " + std::to_string(l) + " outside [0, " + std::to_string(layers) + ")");
    }
  }
}

std::vector<int> StitchSchedule::event_layers(int event) const {
  if (event < 1 || event > events()) {
    throw ContractError("stitch event " + std::to_string(event) + " outside [1, " + std::to_string(events()) + "]");
  }
  std::vector<int> out;
  const int first = (event - 1) * group_size;
  for (int l = first; l < first + group_size - 1; ++l) {
    out.push_back(l);
  }
  return out;
}

int StitchSchedule::events_at(std::int64_t step) const {
  return static_cast<int>(std::min<std::int64_t>(step / period, events()));
}

AttnLayout layout_at(std::int64_t step, const StitchSchedule& schedule) {
  if (step < 0) {
    throw ContractError("layout_at: negative step " + std::to_string(step));
  }
  schedule.validate();
  AttnLayout layout = AttnLayout::all_full(schedule.layers, schedule.group_size);
  for (int e = 1; e <= schedule.events_at(step); ++e) {
    for (int l : schedule.event_layers(e)) {
      layout.kinds[static_cast<std::size_t>(l)] = AttnKind::linear;
    }
  }
  return layout;
}

void stitch(ModelState& student, const AttnLayout& layout) {
  if (layout.size() != student.layout.size()) {
    throw ScheduleError("stitch: layout has " + std::to_string(layout.size()) + " layers, the model " +
                        std::to_string(student.layout.size()));
  }
  for (int l = 0; l < layout.size(); ++l) {
    const auto from = student.layout.kinds[static_cast<std::size_t>(l)];
    const auto to = layout.kinds[static_cast<std::size_t>(l)];
    if (from == AttnKind::linear && to == AttnKind::full) {
      throw ScheduleError("stitch: layer " + std::to_string(l) + " would go back from linear to full attention");
    }
  }
  student.layout.kinds = layout.kinds;
}

std::string schedule_audit(const StitchSchedule& schedule) {
  schedule.validate();
  std::ostringstream os;
  os << "step_event,group,converted_layers\n";
  for (int e = 1; e <= schedule.events(); ++e) {
    os << e * schedule.period << ',' << e - 1 << ',';
    const auto layers = schedule.event_layers(e);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      os << (i ? ";" : "") << layers[i];
    }
    os << '\n';
  }
  return os.str();
}

std::string parameter_hash(const ModelState& state) {
  NamedTensors params;
  for (auto& [name, t] : state.named()) {
    if (name.rfind("meta.", 0) != 0) {
      params.emplace_back(name, t);
    }
  }
  return sha256_hex(encode_checkpoint(params));
}

}  // namespace cnvs
