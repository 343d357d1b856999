#include "est/model.hpp"

#include <cmath>

#include "est/errors.hpp"

namespace est {

namespace {

std::vector<double> xavier(std::size_t count, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(count);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return v;
}

Tensor affine_weight(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  return store.add(name, {in, out}, xavier(in * out, in, out, rng));
}

Tensor zeros_param(ParameterStore& store, const std::string& name, std::size_t n) {
  return store.add(name, {n}, std::vector<double>(n, 0.0));
}

}  // namespace

void ModelConfig::validate() const {
  if (d == 0 || d % 2 != 0) throw ConfigError("d must be positive and even, got " + std::to_string(d));
  if (num_heads == 0 || d % num_heads != 0) {
    throw ConfigError("d=" + std::to_string(d) + " is not divisible by num_heads=" + std::to_string(num_heads));
  }
  if (snippets == 0 || frames_per_snippet == 0) throw ConfigError("snippet counts must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (num_shuffle_types < 2) throw ConfigError("num_shuffle_types must be at least 2");
  if (geometry.height == 0 || geometry.width == 0 || geometry.channels == 0) throw ConfigError("empty frame geometry");
  if (encoder == FrameEncoderKind::kConv) {
    if (geometry.height % 4 != 0 || geometry.width % 4 != 0) {
      throw ConfigError("conv frame encoder needs height and width divisible by 4");
    }
    if (conv1_channels == 0 || conv2_channels == 0) throw ConfigError("conv channel counts must be positive");
  } else {
    if (linear_pool == 0 || geometry.height % linear_pool != 0 || geometry.width % linear_pool != 0) {
      throw ConfigError("linear_pool must divide frame height and width");
    }
  }
  if (!(layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be positive");
}

Tensor positional_encoding(std::size_t n, std::size_t d) {
  if (d % 2 != 0) throw ConfigError("positional encoding needs an even width, got " + std::to_string(d));
  std::vector<double> pe(n * d);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      pe[pos * d + 2 * i] = std::sin(angle);
      pe[pos * d + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor({n, d}, std::move(pe));
}

Tensor frames_to_tensor(const FrameStack& frames) {
  const auto& g = frames.geometry;
  const std::size_t hw = g.height * g.width;
  std::vector<double> out(frames.count * g.frame_size());
  for (std::size_t t = 0; t < frames.count; ++t) {
    auto src = frames.frame(t);
    double* dst = out.data() + t * g.frame_size();
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < g.channels; ++c) dst[c * hw + p] = src[p * g.channels + c];
  }
  return Tensor({frames.count, g.channels, g.height, g.width}, std::move(out));
}

// ---------------------------------------------------------------------------
// Frame encoder

FrameEncoder::FrameEncoder(const ModelConfig& config, ParameterStore& store, Rng& rng) : config_(config) {
  const auto& g = config.geometry;
  std::size_t flat = 0;
  if (config.encoder == FrameEncoderKind::kConv) {
    const std::size_t c0 = g.channels, c1 = config.conv1_channels, c2 = config.conv2_channels;
    conv1_w_ = store.add("frame_encoder.conv1.weight", {c1, c0, 3, 3}, xavier(c1 * c0 * 9, c0 * 9, c1 * 9, rng));
    conv1_b_ = zeros_param(store, "frame_encoder.conv1.bias", c1);
    conv2_w_ = store.add("frame_encoder.conv2.weight", {c2, c1, 3, 3}, xavier(c2 * c1 * 9, c1 * 9, c2 * 9, rng));
    conv2_b_ = zeros_param(store, "frame_encoder.conv2.bias", c2);
    flat = c2 * (g.height / 4) * (g.width / 4);
  } else {
    flat = g.channels * (g.height / config.linear_pool) * (g.width / config.linear_pool);
  }
  proj_w_ = affine_weight(store, "frame_encoder.proj.weight", flat, config.d, rng);
  proj_b_ = zeros_param(store, "frame_encoder.proj.bias", config.d);
  norm_gamma_ = store.add("frame_encoder.norm.gamma", {config.d}, std::vector<double>(config.d, 1.0));
  norm_beta_ = zeros_param(store, "frame_encoder.norm.beta", config.d);
}

Tensor FrameEncoder::encode(const Tensor& frames) const {
  const auto& g = config_.geometry;
  if (frames.rank() != 4 || frames.dim(1) != g.channels || frames.dim(2) != g.height || frames.dim(3) != g.width) {
    throw DimensionError("frame encoder expects [N x " + std::to_string(g.channels) + " x " +
                         std::to_string(g.height) + " x " + std::to_string(g.width) + "], got " +
                         to_string(frames.shape()));
  }
  const std::size_t n = frames.dim(0);
  Tensor x = frames;
  if (config_.encoder == FrameEncoderKind::kConv) {
    if (config_.input_center != 0.0) x = ops::add_scalar(x, -config_.input_center);
    x = ops::avg_pool2d(ops::relu(ops::conv2d(x, conv1_w_, conv1_b_)), 2);
    x = ops::avg_pool2d(ops::relu(ops::conv2d(x, conv2_w_, conv2_b_)), 2);
  } else if (config_.linear_pool > 1) {
    x = ops::avg_pool2d(x, config_.linear_pool);
  }
  x = ops::reshape(x, {n, x.numel() / n});
  return ops::layer_norm(ops::linear(x, proj_w_, proj_b_), norm_gamma_, norm_beta_, config_.layer_norm_eps);
}

// ---------------------------------------------------------------------------
// AA-SFE

SnippetFeatureExtractor::SnippetFeatureExtractor(const ModelConfig& config, ParameterStore& store, Rng& rng)
    : config_(config), encoder_(config, store, rng) {
  const std::size_t d = config.d;
  w_q_ = affine_weight(store, "aa_sfe.w_q", d, d, rng);
  w_k_ = affine_weight(store, "aa_sfe.w_k", d, d, rng);
  w_v_ = affine_weight(store, "aa_sfe.w_v", d, d, rng);
}

Tensor SnippetFeatureExtractor::encode_frames(const Snippet& snippet) const {
  if (snippet.frames.geometry != config_.geometry) {
    throw DimensionError("snippet frame geometry does not match the frame encoder");
  }
  return encoder_.encode(frames_to_tensor(snippet.frames));
}

Tensor SnippetFeatureExtractor::intra_snippet_attention(const Tensor& frame_features) const {
  return ops::scaled_dot_attention(ops::matmul(frame_features, w_q_), ops::matmul(frame_features, w_k_),
                                   ops::matmul(frame_features, w_v_))
      .output;
}

Tensor SnippetFeatureExtractor::global_vector(const Tensor& attended) { return ops::column_max(attended); }

Tensor SnippetFeatureExtractor::frame_weights(const Tensor& attended, const Tensor& global) {
  return ops::row_cosine(attended, global, ops::kCosineEps);
}

Tensor SnippetFeatureExtractor::aggregate(const Tensor& attended, const Tensor& weights) {
  const std::size_t rows = attended.dim(0);
  if (weights.numel() != rows) {
    throw DimensionError("aggregate: " + std::to_string(weights.numel()) + " weights for " + std::to_string(rows) +
                         " frames");
  }
  Tensor weighted = ops::matmul(ops::reshape(weights, {1, rows}), attended);
  Tensor mean = ops::guarded_divide(weighted, ops::sum(weights), ops::kCosineEps);
  return ops::reshape(mean, {attended.dim(1)});
}

Tensor SnippetFeatureExtractor::snippet_from_projections(const Tensor& q, const Tensor& k, const Tensor& v) const {
  Tensor attended = ops::scaled_dot_attention(q, k, v).output;
  Tensor global = global_vector(attended);
  return aggregate(attended, frame_weights(attended, global));
}

Tensor SnippetFeatureExtractor::snippet_feature(const Snippet& snippet) const {
  Tensor attended = intra_snippet_attention(encode_frames(snippet));
  return aggregate(attended, frame_weights(attended, global_vector(attended)));
}

Tensor SnippetFeatureExtractor::extract(const SnippetSet& set) const {
  if (set.snippets.empty()) throw ValidationError("extract: empty snippet set");
  const std::size_t j = set.snippets.front().frames.count;
  FrameStack all;
  all.geometry = set.snippets.front().frames.geometry;
  for (const auto& s : set.snippets) {
    if (s.frames.count != j) throw DimensionError("extract: snippets differ in frame count");
    if (s.frames.geometry != config_.geometry) {
      throw DimensionError("snippet frame geometry does not match the frame encoder");
    }
    all.pixels.insert(all.pixels.end(), s.frames.pixels.begin(), s.frames.pixels.end());
    all.count += s.frames.count;
  }
  Tensor features = encoder_.encode(frames_to_tensor(all));
  Tensor q = ops::matmul(features, w_q_);
  Tensor k = ops::matmul(features, w_k_);
  Tensor v = ops::matmul(features, w_v_);
  std::vector<Tensor> rows;
  rows.reserve(set.snippets.size());
  for (std::size_t i = 0; i < set.snippets.size(); ++i) {
    Tensor r = snippet_from_projections(ops::slice_rows(q, i * j, j), ops::slice_rows(k, i * j, j),
                                        ops::slice_rows(v, i * j, j));
    rows.push_back(ops::reshape(r, {1, config_.d}));
  }
  return ops::concat_rows(rows);
}

// ---------------------------------------------------------------------------
// Transformer blocks

MultiHeadAttention::MultiHeadAttention(const std::string& prefix, std::size_t d, std::size_t heads,
                                       ParameterStore& store, Rng& rng)
    : d_(d), heads_(heads) {
  w_q_ = affine_weight(store, prefix + ".w_q", d, d, rng);
  b_q_ = zeros_param(store, prefix + ".b_q", d);
  w_k_ = affine_weight(store, prefix + ".w_k", d, d, rng);
  w_v_ = affine_weight(store, prefix + ".w_v", d, d, rng);
  b_v_ = zeros_param(store, prefix + ".b_v", d);
  w_o_ = affine_weight(store, prefix + ".w_o", d, d, rng);
  b_o_ = zeros_param(store, prefix + ".b_o", d);
}

MultiHeadAttention::Result MultiHeadAttention::forward(const Tensor& query, const Tensor& memory) const {
  if (query.rank() != 2 || memory.rank() != 2 || query.dim(1) != d_ || memory.dim(1) != d_) {
    throw DimensionError("attention expects width " + std::to_string(d_) + ", got query " +
                         to_string(query.shape()) + " and memory " + to_string(memory.shape()));
  }
  Tensor q = ops::linear(query, w_q_, b_q_);
  Tensor k = ops::matmul(memory, w_k_);
  Tensor v = ops::linear(memory, w_v_, b_v_);
  const std::size_t dh = d_ / heads_;
  std::vector<Tensor> outputs;
  std::vector<double> mean_weights(query.dim(0) * memory.dim(0), 0.0);
  for (std::size_t h = 0; h < heads_; ++h) {
    auto head = ops::scaled_dot_attention(ops::slice_cols(q, h * dh, dh), ops::slice_cols(k, h * dh, dh),
                                          ops::slice_cols(v, h * dh, dh));
    outputs.push_back(head.output);
    auto w = head.weights.data();
    for (std::size_t i = 0; i < w.size(); ++i) mean_weights[i] += w[i] / static_cast<double>(heads_);
  }
  Tensor merged = heads_ == 1 ? outputs.front() : ops::concat_cols(outputs);
  return {ops::linear(merged, w_o_, b_o_), Tensor({query.dim(0), memory.dim(0)}, std::move(mean_weights))};
}

FeedForward::FeedForward(const std::string& prefix, std::size_t d, std::size_t hidden, ParameterStore& store,
                         Rng& rng) {
  w1_ = affine_weight(store, prefix + ".w1", d, hidden, rng);
  b1_ = zeros_param(store, prefix + ".b1", hidden);
  w2_ = affine_weight(store, prefix + ".w2", hidden, d, rng);
  b2_ = zeros_param(store, prefix + ".b2", d);
}

Tensor FeedForward::forward(const Tensor& x) const {
  return ops::linear(ops::relu(ops::linear(x, w1_, b1_)), w2_, b2_);
}

LayerNorm::LayerNorm(const std::string& prefix, std::size_t d, double eps, ParameterStore& store) : eps_(eps) {
  gamma_ = store.add(prefix + ".gamma", {d}, std::vector<double>(d, 1.0));
  beta_ = zeros_param(store, prefix + ".beta", d);
}

Tensor LayerNorm::forward(const Tensor& x) const { return ops::layer_norm(x, gamma_, beta_, eps_); }

EncoderLayer::EncoderLayer(const std::string& prefix, const ModelConfig& config, ParameterStore& store, Rng& rng)
    : attn_(prefix + ".attn", config.d, config.num_heads, store, rng),
      norm1_(prefix + ".norm1", config.d, config.layer_norm_eps, store),
      ffn_(prefix + ".ffn", config.d, config.resolved_ffn_width(), store, rng),
      norm2_(prefix + ".norm2", config.d, config.layer_norm_eps, store) {}

Tensor EncoderLayer::forward(const Tensor& x) const {
  Tensor h = norm1_.forward(ops::add(x, attn_.forward(x, x).output));
  return norm2_.forward(ops::add(h, ffn_.forward(h)));
}

DecoderLayer::DecoderLayer(const std::string& prefix, const ModelConfig& config, ParameterStore& store, Rng& rng)
    : self_attn_(prefix + ".self_attn", config.d, config.num_heads, store, rng),
      norm1_(prefix + ".norm1", config.d, config.layer_norm_eps, store),
      cross_attn_(prefix + ".cross_attn", config.d, config.num_heads, store, rng),
      norm2_(prefix + ".norm2", config.d, config.layer_norm_eps, store),
      ffn_(prefix + ".ffn", config.d, config.resolved_ffn_width(), store, rng),
      norm3_(prefix + ".norm3", config.d, config.layer_norm_eps, store) {}

DecoderLayer::Result DecoderLayer::forward(const Tensor& query, const Tensor& memory) const {
  Tensor q = norm1_.forward(ops::add(query, self_attn_.forward(query, query).output));
  auto cross = cross_attn_.forward(q, memory);
  q = norm2_.forward(ops::add(q, cross.output));
  q = norm3_.forward(ops::add(q, ffn_.forward(q)));
  return {q, cross.weights};
}

MlpHead::MlpHead(const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out,
                 ParameterStore& store, Rng& rng) {
  const std::size_t widths[4] = {in, hidden, hidden, out};
  for (std::size_t i = 0; i < 3; ++i) {
    w_[i] = affine_weight(store, prefix + "." + std::to_string(i) + ".weight", widths[i], widths[i + 1], rng);
    b_[i] = zeros_param(store, prefix + "." + std::to_string(i) + ".bias", widths[i + 1]);
  }
}

Tensor MlpHead::forward(const Tensor& x) const {
  Tensor h = ops::relu(ops::linear(x, w_[0], b_[0]));
  h = ops::relu(ops::linear(h, w_[1], b_[1]));
  return ops::softmax(ops::linear(h, w_[2], b_[2]), 1);
}

// ---------------------------------------------------------------------------
// Full model

namespace {

const ModelConfig& validated(const ModelConfig& config) {
  config.validate();
  return config;
}

std::vector<EncoderLayer> make_encoder(const ModelConfig& config, ParameterStore& store, Rng& rng) {
  std::vector<EncoderLayer> layers;
  for (std::size_t i = 0; i < config.num_encoder_layers; ++i)
    layers.emplace_back("encoder." + std::to_string(i), config, store, rng);
  return layers;
}

std::vector<DecoderLayer> make_decoder(const ModelConfig& config, ParameterStore& store, Rng& rng) {
  std::vector<DecoderLayer> layers;
  for (std::size_t i = 0; i < config.num_decoder_layers; ++i)
    layers.emplace_back("decoder." + std::to_string(i), config, store, rng);
  return layers;
}

Tensor make_query(std::size_t d, ParameterStore& store, Rng& rng) {
  std::vector<double> init(d);
  for (auto& x : init) x = rng.normal();
  return store.add("emotion_query", {1, d}, std::move(init));
}

}  // namespace

EstModel::EstModel(const ModelConfig& config, std::uint64_t seed)
    : config_(validated(config)),
      init_rng_(Rng::derive(seed, Stream::kInit)),
      extractor_(config_, store_, init_rng_),
      encoder_(make_encoder(config_, store_, init_rng_)),
      decoder_(make_decoder(config_, store_, init_rng_)),
      query_(make_query(config_.d, store_, init_rng_)),
      fer_("fer_head", config_.d, config_.d, config_.num_classes, store_, init_rng_),
      ssop_("ssop_head", config_.snippets * config_.d, config_.ssop_hidden(), config_.num_shuffle_types, store_,
            init_rng_),
      positional_(positional_encoding(config_.snippets, config_.d)) {}

Tensor EstModel::snippet_features(const SnippetSet& set) const {
  if (set.snippets.size() != config_.snippets) {
    throw DimensionError("model expects " + std::to_string(config_.snippets) + " snippets, got " +
                         std::to_string(set.snippets.size()));
  }
  for (const auto& s : set.snippets) {
    if (s.frames.count != config_.frames_per_snippet) {
      throw DimensionError("model expects " + std::to_string(config_.frames_per_snippet) +
                           " frames per snippet, got " + std::to_string(s.frames.count));
    }
  }
  return extractor_.extract(set);
}

Tensor EstModel::encode(const Tensor& features, bool positional) const {
  if (features.rank() != 2 || features.dim(1) != config_.d) {
    throw DimensionError("encoder expects [n x " + std::to_string(config_.d) + "], got " +
                         to_string(features.shape()));
  }
  Tensor h = features;
  if (positional) {
    if (features.dim(0) != config_.snippets) {
      throw DimensionError("positional encoding covers " + std::to_string(config_.snippets) + " positions, got " +
                           std::to_string(features.dim(0)));
    }
    h = ops::add(h, positional_);
  }
  for (const auto& layer : encoder_) h = layer.forward(h);
  return h;
}

Decoded EstModel::decode(const Tensor& encoded) const {
  Tensor q = query_;
  Tensor cross;
  for (const auto& layer : decoder_) {
    auto r = layer.forward(q, encoded);
    q = r.output;
    cross = r.cross_attention;
  }
  if (!cross.defined()) cross = Tensor(Shape{1, encoded.dim(0)}, std::vector<double>(encoded.dim(0), 0.0));
  return {q, ops::reshape(cross.detach(), {encoded.dim(0)})};
}

Tensor EstModel::fer_head(const Tensor& emotion) const {
  return ops::reshape(fer_.forward(emotion), {config_.num_classes});
}

Tensor EstModel::order_features(const Tensor& features, const Tensor& emotion) const {
  if (features.rank() != 2 || features.dim(1) != config_.d) {
    throw DimensionError("order features expect [n x d], got " + to_string(features.shape()));
  }
  Tensor o = ops::add_row_bias(features, ops::reshape(emotion, {config_.d}));
  return ops::reshape(o, {1, features.numel()});
}

Tensor EstModel::ssop_head(const Tensor& order) const {
  return ops::reshape(ssop_.forward(order), {config_.num_shuffle_types});
}

ForwardResult EstModel::forward(const SnippetSet& set, bool with_ssop) const {
  return forward_features(snippet_features(set), with_ssop);
}

ForwardResult EstModel::forward_features(const Tensor& features, bool with_ssop) const {
  ForwardResult r;
  r.snippet_features = features;
  r.encoded = encode(features);
  r.decoded = decode(r.encoded);
  r.fer_probs = fer_head(r.decoded.emotion);
  if (with_ssop) r.ssop_probs = ssop_head(order_features(features, r.decoded.emotion));
  return r;
}

void load_model_checkpoint(EstModel& model, const std::vector<CheckpointEntry>& entries) {
  const std::size_t d = model.config().d;
  for (const auto& e : entries) {
    if (e.name != "emotion_query") continue;
    const std::size_t stored = e.shape.empty() ? 0 : e.shape.back();
    if (stored != d) {
      throw ArtifactMismatch("checkpoint width d=" + std::to_string(stored) + " does not match config width d=" +
                             std::to_string(d));
    }
  }
  load_checkpoint(model.parameters(), entries);
}

// ---------------------------------------------------------------------------
// Analytic profile

Profile profile(const ModelConfig& config) {
  config.validate();
  const std::uint64_t n = config.snippets, j = config.frames_per_snippet, d = config.d;
  const std::uint64_t f = config.resolved_ffn_width(), c = config.num_classes;
  const std::uint64_t frames = n * j;
  const auto& g = config.geometry;
  const std::uint64_t h = g.height, w = g.width, ch = g.channels;

  std::uint64_t macs = 0;
  if (config.encoder == FrameEncoderKind::kConv) {
    const std::uint64_t c1 = config.conv1_channels, c2 = config.conv2_channels;
    macs += frames * h * w * c1 * ch * 9;
    macs += frames * (h / 2) * (w / 2) * c2 * c1 * 9;
    macs += frames * (c2 * (h / 4) * (w / 4)) * d;
  } else {
    const std::uint64_t p = config.linear_pool;
    macs += frames * (ch * (h / p) * (w / p)) * d;
  }
  // Frame projections, per-snippet attention, weighted sum.
  macs += 3 * frames * d * d + n * 2 * j * j * d + n * j * d;
  // Encoder layers: projections, scores, context, feed-forward.
  macs += config.num_encoder_layers * (4 * n * d * d + 2 * n * n * d + 2 * n * d * f);
  // Decoder layers with a single query row.
  const std::uint64_t self_attn = 3 * d * d + 2 * d + d * d;
  const std::uint64_t cross_attn = d * d + 2 * n * d * d + 2 * n * d + d * d;
  macs += config.num_decoder_layers * (self_attn + cross_attn + 2 * d * f);
  macs += 2 * d * d + d * c;

  std::uint64_t params = 0;
  if (config.encoder == FrameEncoderKind::kConv) {
    const std::uint64_t c1 = config.conv1_channels, c2 = config.conv2_channels;
    params += c1 * ch * 9 + c1 + c2 * c1 * 9 + c2;
    params += c2 * (h / 4) * (w / 4) * d + d;
  } else {
    const std::uint64_t p = config.linear_pool;
    params += ch * (h / p) * (w / p) * d + d;
  }
  params += 2 * d;
  params += 3 * d * d;
  const std::uint64_t attn_params = 4 * d * d + 3 * d;
  const std::uint64_t ffn_params = d * f + f + f * d + d;
  params += config.num_encoder_layers * (attn_params + ffn_params + 2 * 2 * d);
  params += config.num_decoder_layers * (2 * attn_params + ffn_params + 3 * 2 * d);
  params += d;
  params += (d * d + d) * 2 + d * c + c;
  const std::uint64_t in = n * d, hid = config.ssop_hidden(), s = config.num_shuffle_types;
  params += in * hid + hid + hid * hid + hid + hid * s + s;
  return {params, macs};
}

}  // namespace est
