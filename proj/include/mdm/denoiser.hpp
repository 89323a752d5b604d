#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mdm/diffusion.hpp"
#include "mdm/motion.hpp"

namespace mdm {

enum class Backbone { Encoder, DecoderCrossAttention, DecoderPlusToken };
enum class ConditionMode { Text, Action, Unconditional };
enum class TextEncoderKind { Hashed, External };

std::string to_string(Backbone b);
std::string to_string(ConditionMode m);
Backbone backbone_from_string(const std::string& s);
ConditionMode condition_mode_from_string(const std::string& s);

struct DenoiserConfig {
  int latent_dim = 128;
  int num_layers = 4;
  int num_heads = 4;
  int ff_dim = 256;
  double dropout = 0.1;
  int max_frames = 120;
  int feature_dim = 175;
  int diffusion_steps = 1000;
  Backbone backbone = Backbone::Encoder;
  ConditionMode condition_mode = ConditionMode::Text;
  int num_classes = 0;  // action mode only
  TextEncoderKind text_encoder = TextEncoderKind::Hashed;
  int text_slots = 512;  // hashed bag table rows
  int text_dim = 64;     // hashed bag width, or the external embedder's width
  std::uint64_t init_seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
  bool operator==(const DenoiserConfig&) const = default;
};

// Frozen prompt encoder. Implementations must return the same vector for the
// same prompt.
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual int dim() const = 0;
  virtual std::vector<float> embed(const std::string& prompt) const = 0;
  virtual std::string fingerprint() const = 0;
};

// Prompt -> vector table loaded from JSON: {"dim": D, "embeddings": {prompt: [..]}}.
// Stands in for any pretrained encoder whose outputs were exported offline.
class PrecomputedTextEmbedder : public TextEmbedder {
 public:
  explicit PrecomputedTextEmbedder(const nlohmann::json& j);
  static std::shared_ptr<PrecomputedTextEmbedder> load(const std::string& path);
  int dim() const override { return dim_; }
  std::vector<float> embed(const std::string& prompt) const override;
  std::string fingerprint() const override { return fingerprint_; }

 private:
  int dim_ = 0;
  std::unordered_map<std::string, std::vector<float>> table_;
  std::string fingerprint_;
};

// Lowercase alphanumeric tokens of a prompt, hashed into [0, slots).
std::vector<std::int64_t> hashed_tokens(const std::string& prompt, int slots);

// Sinusoidal features of integer positions: [sin(p w_i), cos(p w_i)], w_i = 10000^(-i/(d/2)).
torch::Tensor sinusoidal_features(const torch::Tensor& positions, int dim);

class MultiheadAttentionImpl : public torch::nn::Module {
 public:
  MultiheadAttentionImpl(int dim, int heads, double dropout);
  // query [B, Sq, D], key/value [B, Sk, D]; key_padding [B, Sk] bool, true = ignore.
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& key, const torch::Tensor& value,
                        const torch::Tensor& key_padding = {});

 private:
  int dim_, heads_;
  double dropout_;
  torch::nn::Linear q_{nullptr}, k_{nullptr}, v_{nullptr}, out_{nullptr};
};
TORCH_MODULE(MultiheadAttention);

// Post-norm encoder layer: x = LN(x + SA(x)); x = LN(x + FF(x)), GELU in FF.
class EncoderLayerImpl : public torch::nn::Module {
 public:
  EncoderLayerImpl(int dim, int heads, int ff_dim, double dropout);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& padding);

 private:
  double dropout_;
  MultiheadAttention attn_{nullptr};
  torch::nn::Linear ff1_{nullptr}, ff2_{nullptr};
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
};
TORCH_MODULE(EncoderLayer);

// Post-norm decoder layer with self-attention, cross-attention to memory, FF.
class DecoderLayerImpl : public torch::nn::Module {
 public:
  DecoderLayerImpl(int dim, int heads, int ff_dim, double dropout);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& padding, const torch::Tensor& memory);

 private:
  double dropout_;
  MultiheadAttention self_attn_{nullptr}, cross_attn_{nullptr};
  torch::nn::Linear ff1_{nullptr}, ff2_{nullptr};
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr}, norm3_{nullptr};
};
TORCH_MODULE(DecoderLayer);

struct ConditionEmbedding {
  torch::Tensor vectors;     // [B, latent]; undefined in unconditional mode
  std::vector<bool> masked;  // replaced by the null embedding
};

class MotionDenoiserImpl : public torch::nn::Module {
 public:
  // `text` is required when config.text_encoder == External.
  explicit MotionDenoiserImpl(const DenoiserConfig& config, std::shared_ptr<const TextEmbedder> text = nullptr);

  const DenoiserConfig& config() const { return config_; }

  // t: int64 [B] in [1, T] -> [B, latent].
  torch::Tensor embed_timestep(const torch::Tensor& t);

  // Each condition replaced by the null embedding with probability
  // mask_prob (drawn from rng). Pass mask_prob = 0 at sampling time.
  ConditionEmbedding embed_condition(const std::vector<Condition>& conditions, std::mt19937_64* rng = nullptr,
                                     double mask_prob = 0.0);

  // x_t [B, N, F], t [B]; lengths [B] (frames beyond are padding) may be
  // empty. Returns x0_hat [B, N, F] with padded rows zeroed.
  torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& t, const ConditionEmbedding& cond,
                        const std::vector<int>& lengths = {});

  torch::Tensor null_embedding() const { return null_; }

 private:
  torch::Tensor padding_mask(const std::vector<int>& lengths, std::int64_t batch, std::int64_t frames) const;

  DenoiserConfig config_;
  std::shared_ptr<const TextEmbedder> text_;
  torch::Tensor positional_;  // [max_frames + 1, latent]
  torch::nn::Linear time_ff1_{nullptr}, time_ff2_{nullptr};
  torch::nn::Linear cond_ff_{nullptr};
  torch::nn::Embedding text_bag_{nullptr};
  torch::nn::Linear text_proj_{nullptr};
  torch::nn::Embedding action_{nullptr};
  torch::Tensor null_;
  torch::nn::Linear input_{nullptr}, output_{nullptr};
  torch::nn::ModuleList layers_{nullptr};
};
TORCH_MODULE(MotionDenoiser);

// Deterministic construction: weights drawn from config.init_seed.
MotionDenoiser make_denoiser(const DenoiserConfig& config, std::shared_ptr<const TextEmbedder> text = nullptr);

// Sampling adapter: evaluation mode, no condition masking.
class DenoiserX0Model : public X0Model {
 public:
  explicit DenoiserX0Model(MotionDenoiser model);
  int feature_dim() const override { return model_->config().feature_dim; }
  int max_frames() const override { return model_->config().max_frames; }
  torch::Tensor predict_x0(const torch::Tensor& x_t, int t, const std::vector<Condition>& conditions) const override;

 private:
  mutable MotionDenoiser model_;
};

// Parameters in registration order, with stable dotted names.
std::vector<std::pair<std::string, torch::Tensor>> named_parameters(const torch::nn::Module& module);

}  // namespace mdm
