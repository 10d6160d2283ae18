#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cnvs/losses.hpp"
#include "cnvs/model.hpp"
#include "cnvs/synth.hpp"

namespace cnvs {

/// Everything a command needs besides paths. Text form is flat `key = value` lines; '#'
/// starts a comment.
struct RunConfig {
  CascadeConfig model;
  LossWeights weights;
  DatasetConfig data;
  int train_views = 12;  // views [0, train_views) train, the rest are held out

  double backbone_rate = 1e-5;
  double head_rate = 2e-4;
  double weight_decay = 1e-5;
  double min_rate = 1e-6;
  std::int64_t steps = 2000;
  int batch = 4;
  std::int64_t checkpoint_every = 500;

  double distill_rate = 1e-6;
  std::int64_t stitch_period = 5000;
  std::int64_t distill_steps = 35000;
  std::int64_t distill_checkpoint_every = 1000;
  std::vector<int> trace_layers;  // empty: the last layer of every group

  std::uint64_t seed = 1;

  /// Throws ConfigError on any inconsistent value.
  void validate() const;
  /// Applies one `key=value` assignment. Throws ConfigError on an unknown key or a bad value.
  void set(const std::string& key, const std::string& value);
  /// Parses a whole config text on top of the current values.
  void apply_text(const std::string& text);
  /// Every key with its value, annotated `# [paper]` or `# [artifact]`.
  std::string dump() const;

  std::vector<int> effective_trace_layers() const;
  std::vector<int> train_view_indices() const;
  std::vector<int> heldout_view_indices() const;

  static RunConfig load(const std::filesystem::path& path);
};

}  // namespace cnvs
