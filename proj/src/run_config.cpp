#include "est/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "est/errors.hpp"

namespace est {

namespace {

std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

std::uint64_t to_uint(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("key '" + std::string(key) + "' expects a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("key '" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
  }
  return out;
}

std::string from_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field uint_field(std::string key, T RunConfig::*section, std::size_t T::*member) {
  return {key,
          [key, section, member](RunConfig& c, std::string_view v) {
            (c.*section).*member = static_cast<std::size_t>(to_uint(key, v));
          },
          [section, member](const RunConfig& c) { return std::to_string((c.*section).*member); }};
}

template <typename T>
Field double_field(std::string key, T RunConfig::*section, double T::*member) {
  return {key, [key, section, member](RunConfig& c, std::string_view v) { (c.*section).*member = to_double(key, v); },
          [section, member](const RunConfig& c) { return from_double((c.*section).*member); }};
}

Field seed_field(std::string key, std::uint64_t RunConfig::*member) {
  return {key, [key, member](RunConfig& c, std::string_view v) { c.*member = to_uint(key, v); },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

Field string_field(std::string key, std::string RunConfig::*member) {
  return {key, [member](RunConfig& c, std::string_view v) { c.*member = std::string(v); },
          [member](const RunConfig& c) { return c.*member; }};
}

Field top_double_field(std::string key, double RunConfig::*member) {
  return {key, [key, member](RunConfig& c, std::string_view v) { c.*member = to_double(key, v); },
          [member](const RunConfig& c) { return from_double(c.*member); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    using R = RunConfig;
    std::vector<Field> f;
    f.push_back(seed_field("seed", &R::seed));
    f.push_back(seed_field("eval_seed", &R::eval_seed));
    f.push_back(seed_field("permutation_seed", &R::permutation_seed));
    f.push_back(string_field("train_data", &R::train_data));
    f.push_back(string_field("test_data", &R::test_data));
    f.push_back(string_field("out_dir", &R::out_dir));

    f.push_back(uint_field("d", &R::model, &ModelConfig::d));
    f.push_back(uint_field("num_heads", &R::model, &ModelConfig::num_heads));
    f.push_back(uint_field("num_encoder_layers", &R::model, &ModelConfig::num_encoder_layers));
    f.push_back(uint_field("num_decoder_layers", &R::model, &ModelConfig::num_decoder_layers));
    f.push_back(uint_field("ffn_width", &R::model, &ModelConfig::ffn_width));
    f.push_back(uint_field("num_classes", &R::model, &ModelConfig::num_classes));
    f.push_back(uint_field("num_shuffle_types", &R::model, &ModelConfig::num_shuffle_types));
    f.push_back({"frame_encoder",
                 [](R& c, std::string_view v) {
                   if (v == "conv") {
                     c.model.encoder = FrameEncoderKind::kConv;
                   } else if (v == "linear") {
                     c.model.encoder = FrameEncoderKind::kLinear;
                   } else {
                     throw ConfigError("key 'frame_encoder' expects conv or linear, got '" + std::string(v) + "'");
                   }
                 },
                 [](const R& c) { return std::string(c.model.encoder == FrameEncoderKind::kConv ? "conv" : "linear"); }});
    f.push_back(uint_field("conv1_channels", &R::model, &ModelConfig::conv1_channels));
    f.push_back(uint_field("conv2_channels", &R::model, &ModelConfig::conv2_channels));
    f.push_back(uint_field("linear_pool", &R::model, &ModelConfig::linear_pool));
    f.push_back(double_field("input_center", &R::model, &ModelConfig::input_center));
    f.push_back(double_field("layer_norm_eps", &R::model, &ModelConfig::layer_norm_eps));
    f.push_back({"height", [](R& c, std::string_view v) { c.model.geometry.height = to_uint("height", v); },
                 [](const R& c) { return std::to_string(c.model.geometry.height); }});
    f.push_back({"width", [](R& c, std::string_view v) { c.model.geometry.width = to_uint("width", v); },
                 [](const R& c) { return std::to_string(c.model.geometry.width); }});
    f.push_back({"channels", [](R& c, std::string_view v) { c.model.geometry.channels = to_uint("channels", v); },
                 [](const R& c) { return std::to_string(c.model.geometry.channels); }});

    f.push_back({"n",
                 [](R& c, std::string_view v) {
                   c.model.snippets = c.pipeline.snippets_per_video = static_cast<std::size_t>(to_uint("n", v));
                 },
                 [](const R& c) { return std::to_string(c.model.snippets); }});
    f.push_back({"J",
                 [](R& c, std::string_view v) {
                   c.model.frames_per_snippet = c.pipeline.frames_per_snippet =
                       static_cast<std::size_t>(to_uint("J", v));
                 },
                 [](const R& c) { return std::to_string(c.model.frames_per_snippet); }});
    f.push_back(uint_field("target_frames", &R::pipeline, &PipelineConfig::target_frames));
    f.push_back(uint_field("window", &R::pipeline, &PipelineConfig::window));
    f.push_back(uint_field("start_range", &R::pipeline, &PipelineConfig::start_range));
    f.push_back(uint_field("subvideo_len", &R::pipeline, &PipelineConfig::subvideo_len));
    f.push_back(uint_field("overlap", &R::pipeline, &PipelineConfig::overlap));

    f.push_back(double_field("learning_rate", &R::train, &TrainConfig::learning_rate));
    f.push_back(double_field("warmup_epochs", &R::train, &TrainConfig::warmup_epochs));
    f.push_back(uint_field("batch_size", &R::train, &TrainConfig::batch_size));
    f.push_back(uint_field("epochs", &R::train, &TrainConfig::epochs));
    f.push_back(double_field("lambda_ssop", &R::train, &TrainConfig::lambda_ssop));
    f.push_back({"optimizer",
                 [](R& c, std::string_view v) {
                   if (v == "sgd") {
                     c.train.optimizer = OptimizerKind::kSgd;
                   } else if (v == "adam") {
                     c.train.optimizer = OptimizerKind::kAdam;
                   } else {
                     throw ConfigError("key 'optimizer' expects sgd or adam, got '" + std::string(v) + "'");
                   }
                 },
                 [](const R& c) { return std::string(c.train.optimizer == OptimizerKind::kSgd ? "sgd" : "adam"); }});
    f.push_back(double_field("momentum", &R::train, &TrainConfig::momentum));
    f.push_back(double_field("adam_beta1", &R::train, &TrainConfig::adam_beta1));
    f.push_back(double_field("adam_beta2", &R::train, &TrainConfig::adam_beta2));
    f.push_back(double_field("adam_eps", &R::train, &TrainConfig::adam_eps));

    f.push_back(top_double_field("gradcheck_step", &R::gradcheck_step));
    f.push_back(top_double_field("gradcheck_tolerance", &R::gradcheck_tolerance));
    return f;
  }();
  return table;
}

const Field& find_field(std::string_view key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

std::pair<std::string_view, std::string_view> split_assignment(std::string_view line) {
  const auto eq = line.find('=');
  if (eq == std::string_view::npos) throw ConfigError("expected key=value, got '" + std::string(line) + "'");
  const auto key = trim(line.substr(0, eq));
  if (key.empty()) throw ConfigError("empty key in '" + std::string(line) + "'");
  return {key, trim(line.substr(eq + 1))};
}

std::uint64_t factorial_capped(std::size_t n) {
  std::uint64_t f = 1;
  for (std::size_t i = 2; i <= n && f < (1u << 30); ++i) f *= i;
  return f;
}

}  // namespace

void RunConfig::finalize() {
  train.seed = seed;
  model.validate();
  pipeline.validate();
  train.validate();
  if (model.snippets != pipeline.snippets_per_video || model.frames_per_snippet != pipeline.frames_per_snippet) {
    throw ConfigError("model and pipeline disagree on snippet shape");
  }
  if (model.num_shuffle_types + 1 > factorial_capped(model.snippets)) {
    throw ConfigError("num_shuffle_types=" + std::to_string(model.num_shuffle_types) + " exceeds the " +
                      std::to_string(factorial_capped(model.snippets) - 1) + " non-identity orders of n=" +
                      std::to_string(model.snippets) + " snippets");
  }
  if (!(gradcheck_step > 0.0)) throw ConfigError("gradcheck_step must be positive");
  if (!(gradcheck_tolerance >= 0.0)) throw ConfigError("gradcheck_tolerance must be non-negative");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

RunConfig parse_run_config(std::string_view text, const std::string& origin) {
  RunConfig config;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      auto [key, value] = split_assignment(line);
      if (!seen.insert(std::string(key)).second) throw ConfigError("key '" + std::string(key) + "' set twice");
      find_field(key).set(config, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), path.string());
}

void apply_override(RunConfig& config, std::string_view assignment) {
  auto [key, value] = split_assignment(trim(assignment));
  find_field(key).set(config, value);
}

std::string render_run_config(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key + "=" + f.get(config) + "\n";
  return out;
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace est
