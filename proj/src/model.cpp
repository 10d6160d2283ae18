#include "cnvs/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "cnvs/ops.hpp"
#include "cnvs/random.hpp"

namespace cnvs {

void CascadeConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (encoder_layers < 0 || decoder_layers < 0 || layers() < 1) {
    fail("needs at least one transformer layer");
  }
  if (group_size < 1 || layers() % group_size != 0) {
    fail("M + N = " + std::to_string(layers()) + " is not divisible by the group size " + std::to_string(group_size));
  }
  if (patch < 1 || height < 1 || width < 1 || height % patch != 0 || width % patch != 0) {
    fail("resolution " + std::to_string(width) + "x" + std::to_string(height) + " not divisible by patch size " +
         std::to_string(patch));
  }
  if (dim < 1 || heads < 1 || dim % heads != 0) {
    fail("token dimension " + std::to_string(dim) + " not divisible into " + std::to_string(heads) + " heads");
  }
  if (dim % 4 != 0) {
    fail("token dimension " + std::to_string(dim) + " must be divisible by 4 for the grid embedding");
  }
  if (prior_channels < 1 || triplane_resolution < 2) {
    fail("prior channels must be positive and the triplane resolution at least 2");
  }
}

std::vector<int> CascadeConfig::trace_layers() const {
  std::vector<int> out;
  for (int i = group_size - 1; i < layers(); i += group_size) {
    out.push_back(i);
  }
  return out;
}

InjectionParams InjectionParams::zeros(std::int64_t channels, std::int64_t d, DType dtype) {
  auto z = [dtype](const Shape& s) { return param(Tensor::zeros(s, dtype)); };
  return {z({1}), z({1}), z({1}), z({1, 1, channels, d}), z({d}), z({1, 1, channels, d}), z({d})};
}

void InjectionParams::append_named(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".gamma_res", gamma_res);
  out.emplace_back(prefix + ".gamma_smpl", gamma_smpl);
  out.emplace_back(prefix + ".gamma_pts", gamma_pts);
  out.emplace_back(prefix + ".conv_smpl.weight", smpl_w);
  out.emplace_back(prefix + ".conv_smpl.bias", smpl_b);
  out.emplace_back(prefix + ".conv_pts.weight", pts_w);
  out.emplace_back(prefix + ".conv_pts.bias", pts_b);
}

std::vector<Tensor*> InjectionParams::tensors() {
  return {&gamma_res, &gamma_smpl, &gamma_pts, &smpl_w, &smpl_b, &pts_w, &pts_b};
}

namespace {

constexpr int kConfigFields = 11;

struct Slot {
  std::string name;
  Tensor* tensor;
  bool backbone;
};

// Every learnable tensor of the state with its canonical name, in checkpoint order.
std::vector<Slot> slots(ModelState& s) {
  std::vector<Slot> out;
  auto zip = [&out](const NamedTensors& names, const std::vector<Tensor*>& ptrs, bool backbone) {
    if (names.size() != ptrs.size()) {
      throw ContractError("parameter naming out of sync with storage");
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      out.push_back({names[i].first, ptrs[i], backbone});
    }
  };
  out.push_back({"tokenizer.source.weight", &s.source_proj.weight, true});
  out.push_back({"tokenizer.source.bias", &s.source_proj.bias, true});
  out.push_back({"tokenizer.target.weight", &s.target_proj.weight, true});
  out.push_back({"tokenizer.target.bias", &s.target_proj.bias, true});
  const int m = s.config.encoder_layers;
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    const int li = static_cast<int>(i);
    const std::string prefix = li < m ? "stage1.block" + std::to_string(li) : "stage3.block" + std::to_string(li - m);
    NamedTensors names;
    s.blocks[i].append_named(prefix, names);
    zip(names, s.blocks[i].tensors(), true);
  }
  {
    NamedTensors names;
    s.inject.append_named("inject", names);
    zip(names, s.inject.tensors(), false);
  }
  {
    NamedTensors names;
    s.smplx.append_named("prior.smplx", names);
    zip(names, s.smplx.tensors(), false);
  }
  out.push_back({"prior.triplane.xy", &s.triplane.xy, false});
  out.push_back({"prior.triplane.xz", &s.triplane.xz, false});
  out.push_back({"prior.triplane.yz", &s.triplane.yz, false});
  {
    NamedTensors names;
    s.points.append_named("prior.points", names);
    zip(names, s.points.tensors(), false);
  }
  out.push_back({"head.nvs.weight", &s.nvs_w, false});
  out.push_back({"head.nvs.bias", &s.nvs_b, false});
  out.push_back({"head.gs.weight", &s.gs_w, false});
  out.push_back({"head.gs.bias", &s.gs_b, false});
  return out;
}

Tensor encode_config(const CascadeConfig& c) {
  return Tensor::from({kConfigFields},
                      {double(c.encoder_layers), double(c.decoder_layers), double(c.dim), double(c.patch),
                       double(c.height), double(c.width), double(c.heads), double(c.group_size),
                       double(c.prior_channels), double(c.triplane_resolution), double(c.dtype)},
                      DType::f64);
}

CascadeConfig decode_config(const Tensor& t) {
  if (t.numel() != kConfigFields) {
    throw IoError("checkpoint: meta.config holds " + std::to_string(t.numel()) + " fields, expected " +
                  std::to_string(kConfigFields));
  }
  const auto v = t.to_vector();
  CascadeConfig c;
  c.encoder_layers = static_cast<int>(v[0]);
  c.decoder_layers = static_cast<int>(v[1]);
  c.dim = static_cast<std::int64_t>(v[2]);
  c.patch = static_cast<std::int64_t>(v[3]);
  c.height = static_cast<int>(v[4]);
  c.width = static_cast<int>(v[5]);
  c.heads = static_cast<int>(v[6]);
  c.group_size = static_cast<int>(v[7]);
  c.prior_channels = static_cast<std::int64_t>(v[8]);
  c.triplane_resolution = static_cast<std::int64_t>(v[9]);
  c.dtype = v[10] == 0.0 ? DType::f32 : DType::f64;
  return c;
}

Tensor run_blocks(Tensor x, const ModelState& s, int begin, int end, const std::vector<int>& trace_layers,
                  std::vector<Tensor>* trace) {
  if (s.layout.size() < end || static_cast<int>(s.blocks.size()) < end) {
    throw ConfigError("attention layout covers " + std::to_string(s.layout.size()) + " layers, the model needs " +
                      std::to_string(end));
  }
  if (x.rank() != 2 || x.dim(1) != s.config.dim) {
    throw DimensionError("token sequence " + shape_str(x.shape()) + " does not match width " +
                         std::to_string(s.config.dim));
  }
  for (int i = begin; i < end; ++i) {
    x = transformer_block(x, s.blocks[static_cast<std::size_t>(i)], s.layout.kinds[static_cast<std::size_t>(i)]);
    if (trace != nullptr && std::find(trace_layers.begin(), trace_layers.end(), i) != trace_layers.end()) {
      trace->push_back(x);
    }
  }
  return x;
}

Tensor pad_and_project(const Tensor& f, const Tensor& w, const Tensor& b, std::int64_t rows, std::int64_t cols,
                       std::int64_t d) {
  if (f.rank() != 3 || f.dim(0) != rows || f.dim(1) != cols || f.dim(2) != w.dim(2)) {
    throw DimensionError("inject_priors: feature map " + shape_str(f.shape()) + " does not cover the " +
                         std::to_string(rows) + "x" + std::to_string(cols) + " target grid with " +
                         std::to_string(w.dim(2)) + " channels");
  }
  const Tensor padded = concat({Tensor::zeros(f.shape(), f.dtype()), f}, 0);
  return reshape(conv2d(padded, w, b), {2 * rows * cols, d});
}

}  // namespace

ModelState ModelState::init(const CascadeConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const DType dt = config.dtype;
  const std::int64_t d = config.dim, p = config.patch, pp = p * p, c = config.prior_channels;
  ModelState s;
  s.config = config;
  s.source_proj = {param(normal_tensor({9 * pp, d}, 1.0 / std::sqrt(9.0 * pp), rng, dt)),
                   param(Tensor::zeros({d}, dt))};
  s.target_proj = {param(normal_tensor({6 * pp, d}, 1.0 / std::sqrt(6.0 * pp), rng, dt)),
                   param(Tensor::zeros({d}, dt))};
  const double out_scale = 1.0 / std::sqrt(2.0 * config.layers());
  for (int i = 0; i < config.layers(); ++i) {
    s.blocks.push_back(TransformerBlockParams::init(d, config.heads, rng, dt, out_scale));
  }
  s.layout = AttnLayout::all_full(config.layers(), config.group_size);
  s.inject = InjectionParams::zeros(c, d, dt);
  s.smplx = SmplxDecoderParams::init(d, c, rng, dt);
  s.triplane = TriplaneParams::init(config.triplane_resolution, c, rng, dt);
  s.points = PointHeadParams::init(d, c, p, rng, dt);
  s.nvs_w = param(normal_tensor({d, 3 * pp}, 0.02, rng, dt));
  s.nvs_b = param(Tensor::zeros({3 * pp}, dt));
  s.gs_w = param(normal_tensor({d, kGaussianChannels * pp}, 0.02, rng, dt));
  // Start the gaussians about one camera radius out with a footprint near one pixel.
  const double depth_bias = std::log(std::expm1(kCameraRadius));
  const double unit = (kInitLogScale - kLogScaleMin) / (kLogScaleMax - kLogScaleMin);
  const double log_scale_bias = std::log(unit / (1.0 - unit));
  std::vector<double> gs_bias(static_cast<std::size_t>(kGaussianChannels * pp), 0.0);
  for (std::int64_t px = 0; px < pp; ++px) {
    gs_bias[static_cast<std::size_t>(px * kGaussianChannels + 0)] = depth_bias;
    gs_bias[static_cast<std::size_t>(px * kGaussianChannels + 1)] = log_scale_bias;
  }
  s.gs_b = param(Tensor::from({kGaussianChannels * pp}, gs_bias, dt));
  return s;
}

ModelState ModelState::clone() const {
  NamedTensors copy = named();
  for (auto& [name, t] : copy) {
    t = t.clone();
  }
  return model_from_named(copy);
}

NamedTensors ModelState::named() const {
  NamedTensors out;
  out.emplace_back("meta.config", encode_config(config));
  std::vector<double> kinds;
  for (AttnKind k : layout.kinds) {
    kinds.push_back(static_cast<double>(k));
  }
  out.emplace_back("meta.layout", Tensor::from({static_cast<std::int64_t>(kinds.size())}, kinds, DType::f64));
  for (const Slot& slot : slots(const_cast<ModelState&>(*this))) {
    out.emplace_back(slot.name, *slot.tensor);
  }
  return out;
}

std::vector<Tensor> ModelState::backbone_params() const {
  std::vector<Tensor> out;
  for (const Slot& slot : slots(const_cast<ModelState&>(*this))) {
    if (slot.backbone) {
      out.push_back(*slot.tensor);
    }
  }
  return out;
}

std::vector<Tensor> ModelState::head_params() const {
  std::vector<Tensor> out;
  for (const Slot& slot : slots(const_cast<ModelState&>(*this))) {
    if (!slot.backbone) {
      out.push_back(*slot.tensor);
    }
  }
  return out;
}

std::vector<Tensor> ModelState::all_params() const {
  std::vector<Tensor> out;
  for (const Slot& slot : slots(const_cast<ModelState&>(*this))) {
    out.push_back(*slot.tensor);
  }
  return out;
}

ModelState model_from_named(const NamedTensors& named) {
  std::map<std::string, Tensor> by_name;
  for (const auto& [name, t] : named) {
    by_name[name] = t;
  }
  auto fetch = [&by_name](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw IoError("checkpoint: missing tensor '" + name + "'");
    }
    return it->second;
  };
  CascadeConfig config = decode_config(fetch("meta.config"));
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint: ") + e.what());
  }
  ModelState s = ModelState::init(config, 0);
  const Tensor layout = fetch("meta.layout");
  if (layout.numel() != config.layers()) {
    throw IoError("checkpoint: layout length " + std::to_string(layout.numel()) + " for " +
                  std::to_string(config.layers()) + " layers");
  }
  for (std::int64_t i = 0; i < layout.numel(); ++i) {
    s.layout.kinds[static_cast<std::size_t>(i)] = layout.at(i) == 0.0 ? AttnKind::full : AttnKind::linear;
  }
  for (const Slot& slot : slots(s)) {
    const Tensor t = fetch(slot.name);
    if (t.shape() != slot.tensor->shape() || t.dtype() != slot.tensor->dtype()) {
      throw IoError("checkpoint: tensor '" + slot.name + "' is " + shape_str(t.shape()) + " " + dtype_name(t.dtype()) +
                    ", expected " + shape_str(slot.tensor->shape()) + " " + dtype_name(slot.tensor->dtype()));
    }
    *slot.tensor = param(t.detach());
  }
  return s;
}

void save_model(const std::filesystem::path& path, const ModelState& state) { save_checkpoint(path, state.named()); }

ModelState load_model(const std::filesystem::path& path) { return model_from_named(load_checkpoint(path)); }

Tensor encode_stage1(const Tensor& tokens, const ModelState& state, const std::vector<int>& trace_layers,
                     std::vector<Tensor>* trace) {
  return run_blocks(tokens, state, 0, state.config.encoder_layers, trace_layers, trace);
}

Tensor decode_stage3(const Tensor& tokens, const ModelState& state, const std::vector<int>& trace_layers,
                     std::vector<Tensor>* trace) {
  return run_blocks(tokens, state, state.config.encoder_layers, state.config.layers(), trace_layers, trace);
}

Tensor inject_priors(const Tensor& t_mid, const Tensor& t_in, const Tensor& f_smpl, const Tensor& f_pts,
                     const InjectionParams& params) {
  if (t_mid.shape() != t_in.shape() || t_mid.rank() != 2) {
    throw DimensionError("inject_priors: sequences " + shape_str(t_mid.shape()) + " and " + shape_str(t_in.shape()) +
                         " differ");
  }
  const std::int64_t d = t_mid.dim(1);
  const std::int64_t rows = f_smpl.rank() == 3 ? f_smpl.dim(0) : 0, cols = f_smpl.rank() == 3 ? f_smpl.dim(1) : 0;
  if (2 * rows * cols != t_mid.dim(0)) {
    throw DimensionError("inject_priors: a " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " feature grid cannot align with " + std::to_string(t_mid.dim(0)) + " tokens");
  }
  const Tensor smpl = pad_and_project(f_smpl, params.smpl_w, params.smpl_b, rows, cols, d);
  const Tensor pts = pad_and_project(f_pts, params.pts_w, params.pts_b, rows, cols, d);
  Tensor out = add(t_mid, mul(smpl, params.gamma_smpl));
  out = add(out, mul(pts, params.gamma_pts));
  return add(out, mul(t_in, params.gamma_res));
}

Tensor nvs_head(const Tensor& target_tokens, const ModelState& state) {
  const auto& c = state.config;
  return unpatchify(sigmoid(add(matmul(target_tokens, state.nvs_w), state.nvs_b)), c.grid_rows(), c.grid_cols(),
                    c.patch);
}

Tensor gaussian_channels(const Tensor& target_tokens, const ModelState& state) {
  const auto& c = state.config;
  return unpatchify(add(matmul(target_tokens, state.gs_w), state.gs_b), c.grid_rows(), c.grid_cols(), c.patch);
}

GaussianSet gaussian_head(const Tensor& target_tokens, const CameraPose& target, const ModelState& state) {
  const auto& c = state.config;
  const std::int64_t h = c.height, w = c.width, g = h * w;
  if (target.width != c.width || target.height != c.height) {
    throw DimensionError("gaussian_head: target camera is " + std::to_string(target.width) + "x" +
                         std::to_string(target.height) + ", model renders " + std::to_string(c.width) + "x" +
                         std::to_string(c.height));
  }
  const Tensor raw = gaussian_channels(target_tokens, state);
  const DType dt = raw.dtype();
  auto channels = [&raw](std::int64_t a, std::int64_t b) { return slice(raw, 2, a, b); };

  // Unit ray per pixel and its derivatives along the image axes, for sub-pixel shifts.
  std::vector<double> dir(static_cast<std::size_t>(g * 3)), du(dir.size()), dv(dir.size());
  const Eigen::Matrix3d rt = target.rotation.transpose();
  for (std::int64_t v = 0; v < h; ++v) {
    for (std::int64_t u = 0; u < w; ++u) {
      const Eigen::Vector3d ray = rt * Eigen::Vector3d((u + 0.5 - target.cx) / target.fx,
                                                       -(v + 0.5 - target.cy) / target.fy, -1.0);
      const double n = ray.norm();
      const Eigen::Vector3d d = ray / n;
      const Eigen::Matrix3d proj = (Eigen::Matrix3d::Identity() - d * d.transpose()) / n;
      const Eigen::Vector3d eu = proj * (rt * Eigen::Vector3d(1.0 / target.fx, 0.0, 0.0));
      const Eigen::Vector3d ev = proj * (rt * Eigen::Vector3d(0.0, -1.0 / target.fy, 0.0));
      for (int a = 0; a < 3; ++a) {
        const auto i = static_cast<std::size_t>((v * w + u) * 3 + a);
        dir[i] = d[a];
        du[i] = eu[a];
        dv[i] = ev[a];
      }
    }
  }
  const Tensor offsets = scale(cnvs::tanh(channels(6, 8)), kRayOffsetMax);
  Tensor ray = add(Tensor::from({h, w, 3}, dir, dt),
                   mul(expand_last(slice(offsets, 2, 0, 1), 3), Tensor::from({h, w, 3}, du, dt)));
  ray = add(ray, mul(expand_last(slice(offsets, 2, 1, 2), 3), Tensor::from({h, w, 3}, dv, dt)));
  const Eigen::Vector3d center = target.center();
  const Tensor depth = softplus(channels(0, 1));
  const Tensor means = add(mul(expand_last(depth, 3), ray), Tensor::from({3}, {center.x(), center.y(), center.z()}, dt));

  GaussianSet out;
  out.means = reshape(means, {g, 3});
  // Smoothly bounded log-scale: a hard clamp would stall training at the bounds.
  const Tensor log_scale = add_scalar(scale(sigmoid(channels(1, 2)), kLogScaleMax - kLogScaleMin), kLogScaleMin);
  out.scales = reshape(cnvs::exp(log_scale), {g});
  out.opacity = reshape(sigmoid(channels(2, 3)), {g});
  out.colors = reshape(sigmoid(channels(3, 6)), {g, 3});
  return out;
}

ForwardResult forward(const ModelState& state, const ForwardInput& input, const ForwardOptions& options) {
  const auto& c = state.config;
  const DType dt = c.dtype;
  if (input.source_image.shape() != Shape{c.height, c.width, 3}) {
    throw DimensionError("forward: source image " + shape_str(input.source_image.shape()) + ", model expects " +
                         shape_str({c.height, c.width, 3}));
  }
  for (const CameraPose* pose : {&input.source_pose, &input.target_pose}) {
    if (pose->width != c.width || pose->height != c.height) {
      throw DimensionError("forward: camera is " + std::to_string(pose->width) + "x" + std::to_string(pose->height) +
                           ", model expects " + std::to_string(c.width) + "x" + std::to_string(c.height));
    }
  }
  const std::vector<int> trace_layers = options.trace_layers.empty() ? c.trace_layers() : options.trace_layers;
  const std::int64_t rows = c.grid_rows(), cols = c.grid_cols(), n = c.tokens_per_view();

  ForwardResult r;
  const Tensor src_image = input.source_image.dtype() == dt ? input.source_image : input.source_image.to(dt);
  const TokenSequence src =
      tokenize_source(src_image, plucker_map(input.source_pose, dt), c.patch, state.source_proj);
  const TokenSequence tgt = tokenize_target(plucker_map(input.target_pose, dt), c.patch, state.target_proj);
  // Plucker maps are close to affine across the image; the grid code gives every token a
  // distinct, non-linear position signature.
  const Tensor grid = grid_embedding(rows, cols, c.dim, dt);
  r.t_in = concat({add(src.tokens, grid), add(tgt.tokens, grid)}, 0);
  r.t_mid = encode_stage1(r.t_in, state, trace_layers, &r.trace);

  if (options.ablate_priors) {
    r.t_mid_injected = r.t_mid;
  } else {
    const Tensor src_mid = slice(r.t_mid, 0, 0, n);
    const Tensor tgt_mid = slice(r.t_mid, 0, n, 2 * n);
    r.body = smplx_decoder(src_mid, rows, cols, state.smplx);
    const Tensor vertices = proxy_forward(r.body, ProxySkeleton::standard());
    r.position_map = render_position_map(vertices, input.target_pose);
    r.f_smpl = triplane_query(r.position_map.positions, r.position_map.mask, state.triplane, c.patch);
    r.points = point_head(tgt_mid, rows, cols, c.patch, state.points);
    r.f_pts = r.points.features;
    r.t_mid_injected = inject_priors(r.t_mid, r.t_in, r.f_smpl, r.f_pts, state.inject);
  }

  r.t_out = decode_stage3(r.t_mid_injected, state, trace_layers, &r.trace);
  // Both heads read normalized tokens; the residual stream itself is left unbounded.
  const Tensor tgt_out = layer_norm(slice(r.t_out, 0, n, 2 * n));
  r.image = nvs_head(tgt_out, state);
  r.gaussians = gaussian_head(tgt_out, input.target_pose, state);
  return r;
}

}  // namespace cnvs
