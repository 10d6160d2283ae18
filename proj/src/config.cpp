#include "cnvs/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>

#include "cnvs/checkpoint.hpp"
#include "cnvs/errors.hpp"

namespace cnvs {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) {
    return "";
  }
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
  return std::string(buf, res.ptr);
}

std::string format_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out += (i ? "," : "") + std::to_string(v[i]);
  }
  return out;
}

std::vector<int> parse_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) {
      out.push_back(parse_number<int>(key, item));
    }
  }
  return out;
}

DType parse_dtype(const std::string& text) {
  if (text == "f32") {
    return DType::f32;
  }
  if (text == "f64") {
    return DType::f64;
  }
  throw ConfigError("config key 'dtype': expected f32 or f64, got '" + text + "'");
}

struct Field {
  const char* key;
  bool paper;  // value taken from the published setup
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define CNVS_FIELD(KEY, PAPER, EXPR, PARSE) \
  Field { KEY, PAPER, [](const RunConfig& c) { return EXPR; }, [](RunConfig& c, const std::string& v) { PARSE; } }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      CNVS_FIELD("encoder_layers", true, std::to_string(c.model.encoder_layers),
                 c.model.encoder_layers = parse_number<int>("encoder_layers", v)),
      CNVS_FIELD("decoder_layers", true, std::to_string(c.model.decoder_layers),
                 c.model.decoder_layers = parse_number<int>("decoder_layers", v)),
      CNVS_FIELD("group_size", true, std::to_string(c.model.group_size),
                 c.model.group_size = parse_number<int>("group_size", v)),
      CNVS_FIELD("dim", false, std::to_string(c.model.dim), c.model.dim = parse_number<std::int64_t>("dim", v)),
      CNVS_FIELD("heads", false, std::to_string(c.model.heads), c.model.heads = parse_number<int>("heads", v)),
      CNVS_FIELD("patch", false, std::to_string(c.model.patch),
                 c.model.patch = parse_number<std::int64_t>("patch", v)),
      CNVS_FIELD("height", false, std::to_string(c.model.height),
                 c.model.height = c.data.height = parse_number<int>("height", v)),
      CNVS_FIELD("width", false, std::to_string(c.model.width),
                 c.model.width = c.data.width = parse_number<int>("width", v)),
      CNVS_FIELD("prior_channels", true, std::to_string(c.model.prior_channels),
                 c.model.prior_channels = parse_number<std::int64_t>("prior_channels", v)),
      CNVS_FIELD("triplane_resolution", false, std::to_string(c.model.triplane_resolution),
                 c.model.triplane_resolution = parse_number<std::int64_t>("triplane_resolution", v)),
      CNVS_FIELD("dtype", false, std::string(dtype_name(c.model.dtype)), c.model.dtype = parse_dtype(v)),

      CNVS_FIELD("lambda_nvs", true, format_double(c.weights.nvs), c.weights.nvs = parse_number<double>("lambda_nvs", v)),
      CNVS_FIELD("lambda_gs", true, format_double(c.weights.gs), c.weights.gs = parse_number<double>("lambda_gs", v)),
      CNVS_FIELD("lambda_pts", true, format_double(c.weights.pts), c.weights.pts = parse_number<double>("lambda_pts", v)),
      CNVS_FIELD("lambda_smplx", true, format_double(c.weights.smplx),
                 c.weights.smplx = parse_number<double>("lambda_smplx", v)),
      CNVS_FIELD("lambda_lpips", true, format_double(c.weights.lpips),
                 c.weights.lpips = parse_number<double>("lambda_lpips", v)),
      CNVS_FIELD("lambda_distill", true, format_double(c.weights.distill),
                 c.weights.distill = parse_number<double>("lambda_distill", v)),
      CNVS_FIELD("lambda_conf", false, format_double(c.weights.conf),
                 c.weights.conf = parse_number<double>("lambda_conf", v)),
      CNVS_FIELD("lambda_abs", false, format_double(c.weights.abs), c.weights.abs = parse_number<double>("lambda_abs", v)),
      CNVS_FIELD("pts_scales", false, std::to_string(c.weights.pts_scales),
                 c.weights.pts_scales = parse_number<int>("pts_scales", v)),

      CNVS_FIELD("identities", false, std::to_string(c.data.identities),
                 c.data.identities = parse_number<int>("identities", v)),
      CNVS_FIELD("views", false, std::to_string(c.data.views), c.data.views = parse_number<int>("views", v)),
      CNVS_FIELD("train_views", false, std::to_string(c.train_views),
                 c.train_views = parse_number<int>("train_views", v)),

      CNVS_FIELD("backbone_rate", true, format_double(c.backbone_rate),
                 c.backbone_rate = parse_number<double>("backbone_rate", v)),
      CNVS_FIELD("head_rate", true, format_double(c.head_rate), c.head_rate = parse_number<double>("head_rate", v)),
      CNVS_FIELD("weight_decay", true, format_double(c.weight_decay),
                 c.weight_decay = parse_number<double>("weight_decay", v)),
      CNVS_FIELD("min_rate", true, format_double(c.min_rate), c.min_rate = parse_number<double>("min_rate", v)),
      CNVS_FIELD("steps", false, std::to_string(c.steps), c.steps = parse_number<std::int64_t>("steps", v)),
      CNVS_FIELD("batch", false, std::to_string(c.batch), c.batch = parse_number<int>("batch", v)),
      CNVS_FIELD("checkpoint_every", false, std::to_string(c.checkpoint_every),
                 c.checkpoint_every = parse_number<std::int64_t>("checkpoint_every", v)),

      CNVS_FIELD("distill_rate", true, format_double(c.distill_rate),
                 c.distill_rate = parse_number<double>("distill_rate", v)),
      CNVS_FIELD("stitch_period", true, std::to_string(c.stitch_period),
                 c.stitch_period = parse_number<std::int64_t>("stitch_period", v)),
      CNVS_FIELD("distill_steps", true, std::to_string(c.distill_steps),
                 c.distill_steps = parse_number<std::int64_t>("distill_steps", v)),
      CNVS_FIELD("distill_checkpoint_every", false, std::to_string(c.distill_checkpoint_every),
                 c.distill_checkpoint_every = parse_number<std::int64_t>("distill_checkpoint_every", v)),
      CNVS_FIELD("trace_layers", false, format_list(c.trace_layers), c.trace_layers = parse_list("trace_layers", v)),

      CNVS_FIELD("seed", false, std::to_string(c.seed), c.seed = c.data.seed = parse_number<std::uint64_t>("seed", v)),
  };
  return table;
}

#undef CNVS_FIELD

}  // namespace

void RunConfig::validate() const {
  model.validate();
  weights.validate();
  if (data.identities < 1 || data.views < 5) {
    throw ConfigError("dataset needs at least 1 identity and 5 views");
  }
  if (data.width != model.width || data.height != model.height) {
    throw ConfigError("dataset resolution differs from the model resolution");
  }
  if (train_views < 1 || train_views > data.views) {
    throw ConfigError("train_views must lie in [1, views], got " + std::to_string(train_views));
  }
  if (backbone_rate < 0 || head_rate < 0 || min_rate < 0 || weight_decay < 0 || distill_rate < 0) {
    throw ConfigError("rates and weight decay must be non-negative");
  }
  if (steps < 0 || distill_steps < 0 || batch < 1 || checkpoint_every < 1 || distill_checkpoint_every < 1 ||
      stitch_period < 1) {
    throw ConfigError("step counts must be non-negative, batch and periods positive");
  }
  for (int l : trace_layers) {
    if (l < 0 || l >= model.layers()) {
      throw ConfigError("trace layer " + std::to_string(l) + " outside the network");
    }
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(*this, trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::apply_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    }
    set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& f : fields()) {
    std::string line = std::string(f.key) + " = " + f.get(*this);
    line.resize(std::max<std::size_t>(line.size() + 1, 40), ' ');
    out += line + (f.paper ? "# [paper]\n" : "# [artifact]\n");
  }
  return out;
}

std::vector<int> RunConfig::effective_trace_layers() const {
  return trace_layers.empty() ? model.trace_layers() : trace_layers;
}

std::vector<int> RunConfig::train_view_indices() const {
  std::vector<int> out;
  for (int v = 0; v < train_views; ++v) {
    out.push_back(v);
  }
  return out;
}

std::vector<int> RunConfig::heldout_view_indices() const {
  std::vector<int> out;
  for (int v = train_views; v < data.views; ++v) {
    out.push_back(v);
  }
  return out;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  RunConfig c;
  c.apply_text(std::string(bytes.begin(), bytes.end()));
  return c;
}

}  // namespace cnvs
