#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cnvs/attention.hpp"
#include "cnvs/camera.hpp"
#include "cnvs/checkpoint.hpp"
#include "cnvs/geometry.hpp"
#include "cnvs/splat.hpp"

namespace cnvs {

/// Per-pixel gaussian channels: depth, log-scale, opacity, rgb, and a sub-pixel ray offset (u, v).
inline constexpr std::int64_t kGaussianChannels = 8;
inline constexpr double kLogScaleMin = -6.0;
inline constexpr double kLogScaleMax = 0.0;
/// Log-scale of a fresh gaussian head (about 3 cm, one pixel footprint at 64 px).
inline constexpr double kInitLogScale = -3.5;
/// Largest sub-pixel shift of a gaussian's ray, in pixels.
inline constexpr double kRayOffsetMax = 0.5;

struct CascadeConfig {
  int encoder_layers = 12;   // M
  int decoder_layers = 24;   // N
  std::int64_t dim = 256;    // d
  std::int64_t patch = 8;    // p
  int height = 64;
  int width = 64;
  int heads = 8;
  int group_size = 6;        // g
  std::int64_t prior_channels = 32;
  std::int64_t triplane_resolution = 32;
  DType dtype = DType::f32;

  /// Throws ConfigError when a divisibility or positivity requirement fails.
  void validate() const;
  int layers() const { return encoder_layers + decoder_layers; }
  std::int64_t grid_rows() const { return height / patch; }
  std::int64_t grid_cols() const { return width / patch; }
  /// Tokens per view; the joint sequence holds twice as many.
  std::int64_t tokens_per_view() const { return grid_rows() * grid_cols(); }
  /// Post-block outputs recorded for distillation: the last layer of every group.
  std::vector<int> trace_layers() const;
};

struct InjectionParams {
  Tensor gamma_res;   // [1]
  Tensor gamma_smpl;  // [1]
  Tensor gamma_pts;   // [1]
  Tensor smpl_w;      // [1 x 1 x C x d]
  Tensor smpl_b;      // [d]
  Tensor pts_w;
  Tensor pts_b;

  /// Everything exactly zero, so the injection starts as the identity.
  static InjectionParams zeros(std::int64_t channels, std::int64_t d, DType dtype);
  void append_named(const std::string& prefix, NamedTensors& out) const;
  std::vector<Tensor*> tensors();
};

struct ModelState {
  CascadeConfig config;
  PatchProjection source_proj;
  PatchProjection target_proj;
  std::vector<TransformerBlockParams> blocks;
  AttnLayout layout;
  InjectionParams inject;
  SmplxDecoderParams smplx;
  TriplaneParams triplane;
  PointHeadParams points;
  Tensor nvs_w, nvs_b;  // [d x 3p^2]
  Tensor gs_w, gs_b;    // [d x 8p^2]

  /// Fresh model with an all-Full layout.
  static ModelState init(const CascadeConfig& config, std::uint64_t seed);
  /// Deep copy: no storage is shared with this state.
  ModelState clone() const;

  /// Canonical names: tokenizer.*, stage1.block{i}.*, stage3.block{i}.*, inject.*, prior.*,
  /// head.{nvs|gs}.*, plus meta.config and meta.layout.
  NamedTensors named() const;
  /// Tokenizer and transformer blocks.
  std::vector<Tensor> backbone_params() const;
  /// Injection gates, prior branches and output heads.
  std::vector<Tensor> head_params() const;
  std::vector<Tensor> all_params() const;
};

void save_model(const std::filesystem::path& path, const ModelState& state);
ModelState load_model(const std::filesystem::path& path);
/// Rebuilds a state from named tensors. Throws IoError when a tensor is missing or misshapen.
ModelState model_from_named(const NamedTensors& named);

/// Applies blocks [0, M). Records post-block outputs of the listed layers into `trace`.
Tensor encode_stage1(const Tensor& tokens, const ModelState& state, const std::vector<int>& trace_layers = {},
                     std::vector<Tensor>* trace = nullptr);
/// Applies blocks [M, M+N).
Tensor decode_stage3(const Tensor& tokens, const ModelState& state, const std::vector<int>& trace_layers = {},
                     std::vector<Tensor>* trace = nullptr);

/// t_mid + g_smpl conv(F_smpl) + g_pts conv(F_pts) + g_res t_in. The feature maps cover the
/// target-token grid [rows x cols x C]; they are zero-padded over the source positions before
/// the 1x1 convolutions so the result lines up with the joint sequence.
Tensor inject_priors(const Tensor& t_mid, const Tensor& t_in, const Tensor& f_smpl, const Tensor& f_pts,
                     const InjectionParams& params);

/// Target tokens -> image [H x W x 3] through a linear map, sigmoid and unpatchify.
Tensor nvs_head(const Tensor& target_tokens, const ModelState& state);

/// Raw per-pixel gaussian channels [H x W x 8] before activation.
Tensor gaussian_channels(const Tensor& target_tokens, const ModelState& state);
/// One gaussian per target pixel, placed along (a sub-pixel shift of) the pixel's ray.
GaussianSet gaussian_head(const Tensor& target_tokens, const CameraPose& target, const ModelState& state);

struct ForwardInput {
  Tensor source_image;  // [H x W x 3]
  CameraPose source_pose;
  CameraPose target_pose;
};

struct ForwardOptions {
  /// Skip the whole prior branch: t'_mid = t_mid.
  bool ablate_priors = false;
  /// Overrides CascadeConfig::trace_layers when non-empty.
  std::vector<int> trace_layers;
};

struct ForwardResult {
  Tensor image;  // [H x W x 3] in (0, 1)
  GaussianSet gaussians;
  Tensor t_in;
  Tensor t_mid;
  Tensor t_mid_injected;
  Tensor t_out;
  std::vector<Tensor> trace;
  // Prior branch; undefined when ablated.
  BodyParams body;
  PointMapPrediction points;
  PositionMap position_map;
  Tensor f_smpl;
  Tensor f_pts;
};

ForwardResult forward(const ModelState& state, const ForwardInput& input, const ForwardOptions& options = {});

}  // namespace cnvs
