#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "est/ops.hpp"
#include "est/parameters.hpp"
#include "est/rng.hpp"
#include "est/video.hpp"

namespace est {

enum class FrameEncoderKind { kConv, kLinear };

struct ModelConfig {
  std::size_t d = 64;
  std::size_t snippets = 7;            // n
  std::size_t frames_per_snippet = 5;  // J
  std::size_t num_heads = 4;
  std::size_t num_encoder_layers = 3;
  std::size_t num_decoder_layers = 3;
  std::size_t ffn_width = 0;  // 0 means 4 * d
  std::size_t num_classes = 7;
  std::size_t num_shuffle_types = 10;

  FrameGeometry geometry{32, 32, 1};
  FrameEncoderKind encoder = FrameEncoderKind::kConv;
  std::size_t conv1_channels = 4;
  std::size_t conv2_channels = 8;
  std::size_t linear_pool = 4;  // average-pool factor ahead of the linear encoder
  // Subtracted from pixels ahead of the conv encoder. A linear encoder folds
  // any constant shift into its bias, so it sees raw pixels.
  double input_center = 0.5;

  double layer_norm_eps = ops::kLayerNormEps;

  std::size_t resolved_ffn_width() const noexcept { return ffn_width == 0 ? 4 * d : ffn_width; }
  std::size_t ssop_hidden() const noexcept { return snippets * d / 2; }
  // Throws ConfigError.
  void validate() const;
};

// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(...). d must be even.
Tensor positional_encoding(std::size_t n, std::size_t d);

// (T, H, W, C) float32 frames -> [T x C x H x W] float64 tensor.
Tensor frames_to_tensor(const FrameStack& frames);

// Per-frame encoder mapping [N x C x H x W] frames to [N x d] features.
// Conv mode: center pixels, two conv3x3 + relu + avgpool2 stages, then a
// linear map. Linear mode: avgpool by linear_pool, then a linear map.
// Both end in a layer norm so frame features enter at unit scale.
class FrameEncoder {
 public:
  FrameEncoder(const ModelConfig& config, ParameterStore& store, Rng& rng);
  Tensor encode(const Tensor& frames) const;

 private:
  ModelConfig config_;
  Tensor conv1_w_, conv1_b_, conv2_w_, conv2_b_;
  Tensor proj_w_, proj_b_;
  Tensor norm_gamma_, norm_beta_;
};

// Attention-augmented snippet feature extractor: frame self-attention, then
// max-pooled global vector, cosine weights, and a weighted mean.
class SnippetFeatureExtractor {
 public:
  SnippetFeatureExtractor(const ModelConfig& config, ParameterStore& store, Rng& rng);

  // I [J x d]
  Tensor encode_frames(const Snippet& snippet) const;
  // I' = attention(I W_Q, I W_K, I W_V), no positional information.
  Tensor intra_snippet_attention(const Tensor& frame_features) const;
  static Tensor global_vector(const Tensor& attended);
  static Tensor frame_weights(const Tensor& attended, const Tensor& global);
  // sum_j alpha_j I'_j / sum_j alpha_j, shape [d].
  static Tensor aggregate(const Tensor& attended, const Tensor& weights);

  // R_i [d] for one snippet.
  Tensor snippet_feature(const Snippet& snippet) const;
  // R [n x d]. Encodes and projects all frames in one batch; each row still
  // depends only on its own snippet.
  Tensor extract(const SnippetSet& set) const;

  const FrameEncoder& frame_encoder() const noexcept { return encoder_; }

 private:
  Tensor snippet_from_projections(const Tensor& q, const Tensor& k, const Tensor& v) const;

  ModelConfig config_;
  FrameEncoder encoder_;
  Tensor w_q_, w_k_, w_v_;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention(const std::string& prefix, std::size_t d, std::size_t heads, ParameterStore& store, Rng& rng);

  struct Result {
    Tensor output;   // [a x d]
    Tensor weights;  // [a x b], mean over heads
  };
  Result forward(const Tensor& query, const Tensor& memory) const;

 private:
  std::size_t d_, heads_;
  // No key bias: it shifts every score in a row equally and cancels in the
  // softmax, so its gradient is identically zero.
  Tensor w_q_, b_q_, w_k_, w_v_, b_v_, w_o_, b_o_;
};

class FeedForward {
 public:
  FeedForward(const std::string& prefix, std::size_t d, std::size_t hidden, ParameterStore& store, Rng& rng);
  Tensor forward(const Tensor& x) const;

 private:
  Tensor w1_, b1_, w2_, b2_;
};

class LayerNorm {
 public:
  LayerNorm(const std::string& prefix, std::size_t d, double eps, ParameterStore& store);
  Tensor forward(const Tensor& x) const;

 private:
  double eps_;
  Tensor gamma_, beta_;
};

// Post-norm: x = LN(x + SelfAttn(x)); x = LN(x + FFN(x)).
class EncoderLayer {
 public:
  EncoderLayer(const std::string& prefix, const ModelConfig& config, ParameterStore& store, Rng& rng);
  Tensor forward(const Tensor& x) const;

 private:
  MultiHeadAttention attn_;
  LayerNorm norm1_;
  FeedForward ffn_;
  LayerNorm norm2_;
};

// Post-norm: q = LN(q + SelfAttn(q)); q = LN(q + CrossAttn(q, H)); q = LN(q + FFN(q)).
class DecoderLayer {
 public:
  DecoderLayer(const std::string& prefix, const ModelConfig& config, ParameterStore& store, Rng& rng);
  struct Result {
    Tensor output;            // [1 x d]
    Tensor cross_attention;   // [1 x n]
  };
  Result forward(const Tensor& query, const Tensor& memory) const;

 private:
  MultiHeadAttention self_attn_;
  LayerNorm norm1_;
  MultiHeadAttention cross_attn_;
  LayerNorm norm2_;
  FeedForward ffn_;
  LayerNorm norm3_;
};

// Three affine layers with relu between, softmax on the output.
class MlpHead {
 public:
  MlpHead(const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out, ParameterStore& store,
          Rng& rng);
  Tensor forward(const Tensor& x) const;  // [1 x out] probabilities

 private:
  Tensor w_[3], b_[3];
};

struct Decoded {
  Tensor emotion;          // T [1 x d]
  Tensor cross_attention;  // last decoder layer, [n], sums to one
};

struct ForwardResult {
  Tensor snippet_features;  // R [n x d]
  Tensor encoded;           // H [n x d]
  Decoded decoded;
  Tensor fer_probs;   // [num_classes]
  Tensor ssop_probs;  // [num_shuffle_types], only when requested
};

// Snippet-level encoder-decoder Transformer with an emotion query, an
// expression-classification head, and a shuffled-order head.
class EstModel {
 public:
  EstModel(const ModelConfig& config, std::uint64_t seed);

  EstModel(const EstModel&) = delete;
  EstModel& operator=(const EstModel&) = delete;

  const ModelConfig& config() const noexcept { return config_; }
  ParameterStore& parameters() noexcept { return store_; }
  const ParameterStore& parameters() const noexcept { return store_; }
  const SnippetFeatureExtractor& extractor() const noexcept { return extractor_; }
  const Tensor& emotion_query() const noexcept { return query_; }

  Tensor snippet_features(const SnippetSet& set) const;
  // H = Encoder(R + PE). positional=false drops the encoding.
  Tensor encode(const Tensor& features, bool positional = true) const;
  Decoded decode(const Tensor& encoded) const;
  Tensor fer_head(const Tensor& emotion) const;
  // O_i = R_i + T, rows concatenated into [1 x n*d].
  Tensor order_features(const Tensor& features, const Tensor& emotion) const;
  Tensor ssop_head(const Tensor& order) const;

  ForwardResult forward(const SnippetSet& set, bool with_ssop) const;
  // Everything after snippet feature extraction.
  ForwardResult forward_features(const Tensor& features, bool with_ssop) const;

 private:
  ModelConfig config_;
  ParameterStore store_;
  Rng init_rng_;
  SnippetFeatureExtractor extractor_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Tensor query_;
  MlpHead fer_;
  MlpHead ssop_;
  Tensor positional_;
};

// Checks the checkpoint's feature width against the model before loading.
// Throws ArtifactMismatch naming both widths, or on any name/shape mismatch.
void load_model_checkpoint(EstModel& model, const std::vector<CheckpointEntry>& entries);

struct Profile {
  std::uint64_t parameters = 0;
  std::uint64_t macs = 0;  // one inference forward pass over one video
};

// Analytic counts. Parameters: every learnable element. MACs: every
// multiply-accumulate performed by matmul and conv2d during inference
// (classification path only).
Profile profile(const ModelConfig& config);

}  // namespace est
