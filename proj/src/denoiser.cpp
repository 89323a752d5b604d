#include "mdm/denoiser.hpp"

#include <cctype>
#include <cmath>
#include <fstream>

#include "mdm/error.hpp"
#include "mdm/hash.hpp"
#include "mdm/motion_io.hpp"

namespace mdm {

std::string to_string(Backbone b) {
  switch (b) {
    case Backbone::Encoder: return "encoder";
    case Backbone::DecoderCrossAttention: return "decoder_cross_attention";
    case Backbone::DecoderPlusToken: return "decoder_plus_token";
  }
  return "encoder";
}

std::string to_string(ConditionMode m) {
  switch (m) {
    case ConditionMode::Text: return "text";
    case ConditionMode::Action: return "action";
    case ConditionMode::Unconditional: return "none";
  }
  return "none";
}

Backbone backbone_from_string(const std::string& s) {
  if (s == "encoder") return Backbone::Encoder;
  if (s == "decoder_cross_attention") return Backbone::DecoderCrossAttention;
  if (s == "decoder_plus_token") return Backbone::DecoderPlusToken;
  throw ValidationError("unknown backbone '" + s + "' (encoder, decoder_cross_attention, decoder_plus_token)");
}

ConditionMode condition_mode_from_string(const std::string& s) {
  if (s == "text") return ConditionMode::Text;
  if (s == "action") return ConditionMode::Action;
  if (s == "none" || s == "unconditional") return ConditionMode::Unconditional;
  throw ValidationError("unknown condition mode '" + s + "' (text, action, none)");
}

void DenoiserConfig::validate() const {
  if (latent_dim <= 0 || num_heads <= 0 || latent_dim % num_heads != 0) {
    throw ValidationError("denoiser: latent_dim must be a positive multiple of num_heads");
  }
  if (latent_dim % 2 != 0) throw ValidationError("denoiser: latent_dim must be even");
  if (num_layers < 1) throw ValidationError("denoiser: num_layers must be >= 1");
  if (ff_dim < 1) throw ValidationError("denoiser: ff_dim must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("denoiser: dropout must lie in [0, 1)");
  if (max_frames < 2) throw ValidationError("denoiser: max_frames must be >= 2");
  if (feature_dim < 1) throw ValidationError("denoiser: feature_dim must be >= 1");
  if (diffusion_steps < 2) throw ValidationError("denoiser: diffusion_steps must be >= 2");
  if (condition_mode == ConditionMode::Action && num_classes < 1) {
    throw ValidationError("denoiser: action mode needs num_classes >= 1");
  }
  if (text_slots < 1 || text_dim < 1) throw ValidationError("denoiser: text_slots and text_dim must be >= 1");
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"latent_dim", latent_dim},
          {"num_layers", num_layers},
          {"num_heads", num_heads},
          {"ff_dim", ff_dim},
          {"dropout", dropout},
          {"max_frames", max_frames},
          {"feature_dim", feature_dim},
          {"diffusion_steps", diffusion_steps},
          {"backbone", to_string(backbone)},
          {"condition_mode", to_string(condition_mode)},
          {"num_classes", num_classes},
          {"text_encoder", text_encoder == TextEncoderKind::Hashed ? "hashed" : "external"},
          {"text_slots", text_slots},
          {"text_dim", text_dim},
          {"init_seed", init_seed}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.latent_dim = j.at("latent_dim").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.max_frames = j.at("max_frames").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.diffusion_steps = j.at("diffusion_steps").get<int>();
  c.backbone = backbone_from_string(j.at("backbone").get<std::string>());
  c.condition_mode = condition_mode_from_string(j.at("condition_mode").get<std::string>());
  c.num_classes = j.at("num_classes").get<int>();
  const auto kind = j.at("text_encoder").get<std::string>();
  if (kind != "hashed" && kind != "external") throw FormatError("denoiser config: unknown text_encoder " + kind);
  c.text_encoder = kind == "hashed" ? TextEncoderKind::Hashed : TextEncoderKind::External;
  c.text_slots = j.at("text_slots").get<int>();
  c.text_dim = j.at("text_dim").get<int>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  c.validate();
  return c;
}

PrecomputedTextEmbedder::PrecomputedTextEmbedder(const nlohmann::json& j) {
  dim_ = j.at("dim").get<int>();
  if (dim_ < 1) throw FormatError("text embeddings: dim must be >= 1");
  for (const auto& [prompt, vec] : j.at("embeddings").items()) {
    auto v = vec.get<std::vector<float>>();
    if (static_cast<int>(v.size()) != dim_) throw FormatError("text embeddings: wrong width for '" + prompt + "'");
    table_.emplace(prompt, std::move(v));
  }
  fingerprint_ = hash_hex(j.dump());
}

std::shared_ptr<PrecomputedTextEmbedder> PrecomputedTextEmbedder::load(const std::string& path) {
  try {
    return std::make_shared<PrecomputedTextEmbedder>(nlohmann::json::parse(read_text_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("text embeddings " + path + ": " + e.what());
  }
}

std::vector<float> PrecomputedTextEmbedder::embed(const std::string& prompt) const {
  const auto it = table_.find(prompt);
  if (it == table_.end()) throw ValidationError("no precomputed embedding for prompt '" + prompt + "'");
  return it->second;
}

std::vector<std::int64_t> hashed_tokens(const std::string& prompt, int slots) {
  std::vector<std::int64_t> ids;
  std::string token;
  const auto flush = [&] {
    if (token.empty()) return;
    Fnv1a64 h;
    h.update(token);
    ids.push_back(static_cast<std::int64_t>(h.digest() % static_cast<std::uint64_t>(slots)));
    token.clear();
  };
  for (char ch : prompt) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) token.push_back(static_cast<char>(std::tolower(u)));
    else flush();
  }
  flush();
  return ids;
}

torch::Tensor sinusoidal_features(const torch::Tensor& positions, int dim) {
  const int half = dim / 2;
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  const auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, opts) / half);
  const auto angles = positions.to(torch::kFloat64).unsqueeze(-1) * freqs;
  return torch::cat({torch::sin(angles), torch::cos(angles)}, -1).to(torch::kFloat32);
}

MultiheadAttentionImpl::MultiheadAttentionImpl(int dim, int heads, double dropout)
    : dim_(dim), heads_(heads), dropout_(dropout) {
  q_ = register_module("q", torch::nn::Linear(dim, dim));
  k_ = register_module("k", torch::nn::Linear(dim, dim));
  v_ = register_module("v", torch::nn::Linear(dim, dim));
  out_ = register_module("out", torch::nn::Linear(dim, dim));
}

torch::Tensor MultiheadAttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& key,
                                              const torch::Tensor& value, const torch::Tensor& key_padding) {
  const auto B = query.size(0), Sq = query.size(1), Sk = key.size(1);
  const int dh = dim_ / heads_;
  auto q = q_(query).view({B, Sq, heads_, dh}).transpose(1, 2);
  auto k = k_(key).view({B, Sk, heads_, dh}).transpose(1, 2);
  auto v = v_(value).view({B, Sk, heads_, dh}).transpose(1, 2);
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
  if (key_padding.defined()) {
    scores = scores.masked_fill(key_padding.view({B, 1, 1, Sk}), -std::numeric_limits<double>::infinity());
  }
  auto weights = torch::dropout(torch::softmax(scores, -1), dropout_, is_training());
  auto ctx = torch::matmul(weights, v).transpose(1, 2).reshape({B, Sq, dim_});
  return out_(ctx);
}

EncoderLayerImpl::EncoderLayerImpl(int dim, int heads, int ff_dim, double dropout) : dropout_(dropout) {
  attn_ = register_module("attn", MultiheadAttention(dim, heads, dropout));
  ff1_ = register_module("ff1", torch::nn::Linear(dim, ff_dim));
  ff2_ = register_module("ff2", torch::nn::Linear(ff_dim, dim));
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

torch::Tensor EncoderLayerImpl::forward(const torch::Tensor& x, const torch::Tensor& padding) {
  const bool train = is_training();
  auto h = norm1_(x + torch::dropout(attn_(x, x, x, padding), dropout_, train));
  auto ff = ff2_(torch::dropout(torch::gelu(ff1_(h)), dropout_, train));
  return norm2_(h + torch::dropout(ff, dropout_, train));
}

DecoderLayerImpl::DecoderLayerImpl(int dim, int heads, int ff_dim, double dropout) : dropout_(dropout) {
  self_attn_ = register_module("self_attn", MultiheadAttention(dim, heads, dropout));
  cross_attn_ = register_module("cross_attn", MultiheadAttention(dim, heads, dropout));
  ff1_ = register_module("ff1", torch::nn::Linear(dim, ff_dim));
  ff2_ = register_module("ff2", torch::nn::Linear(ff_dim, dim));
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm3_ = register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

torch::Tensor DecoderLayerImpl::forward(const torch::Tensor& x, const torch::Tensor& padding,
                                        const torch::Tensor& memory) {
  const bool train = is_training();
  auto h = norm1_(x + torch::dropout(self_attn_(x, x, x, padding), dropout_, train));
  h = norm2_(h + torch::dropout(cross_attn_(h, memory, memory), dropout_, train));
  auto ff = ff2_(torch::dropout(torch::gelu(ff1_(h)), dropout_, train));
  return norm3_(h + torch::dropout(ff, dropout_, train));
}

MotionDenoiserImpl::MotionDenoiserImpl(const DenoiserConfig& config, std::shared_ptr<const TextEmbedder> text)
    : config_(config), text_(std::move(text)) {
  config_.validate();
  const int D = config_.latent_dim;
  positional_ = register_buffer("positional", sinusoidal_features(torch::arange(config_.max_frames + 1), D));
  time_ff1_ = register_module("time_ff1", torch::nn::Linear(D, D));
  time_ff2_ = register_module("time_ff2", torch::nn::Linear(D, D));
  switch (config_.condition_mode) {
    case ConditionMode::Text:
      if (config_.text_encoder == TextEncoderKind::Hashed) {
        text_bag_ = register_module("text_bag", torch::nn::Embedding(config_.text_slots, config_.text_dim));
      } else {
        if (!text_) throw ValidationError("denoiser: external text encoder selected but none supplied");
        if (text_->dim() != config_.text_dim) throw ValidationError("denoiser: text embedder width != text_dim");
      }
      text_proj_ = register_module("text_proj", torch::nn::Linear(config_.text_dim, D));
      break;
    case ConditionMode::Action:
      action_ = register_module("action", torch::nn::Embedding(config_.num_classes, D));
      break;
    case ConditionMode::Unconditional:
      break;
  }
  if (config_.condition_mode != ConditionMode::Unconditional) {
    null_ = register_parameter("null", torch::randn({D}) * 0.02);
    cond_ff_ = register_module("cond_ff", torch::nn::Linear(D, D));
  }
  input_ = register_module("input", torch::nn::Linear(config_.feature_dim, D));
  output_ = register_module("output", torch::nn::Linear(D, config_.feature_dim));
  layers_ = register_module("layers", torch::nn::ModuleList());
  for (int i = 0; i < config_.num_layers; ++i) {
    if (config_.backbone == Backbone::Encoder) {
      layers_->push_back(EncoderLayer(D, config_.num_heads, config_.ff_dim, config_.dropout));
    } else {
      layers_->push_back(DecoderLayer(D, config_.num_heads, config_.ff_dim, config_.dropout));
    }
  }
}

torch::Tensor MotionDenoiserImpl::embed_timestep(const torch::Tensor& t) {
  if (t.dim() != 1) throw ShapeError("embed_timestep: t must be 1-D");
  const auto lo = t.min().item<std::int64_t>(), hi = t.max().item<std::int64_t>();
  if (lo < 1 || hi > config_.diffusion_steps) {
    throw ValidationError("embed_timestep: t outside [1, " + std::to_string(config_.diffusion_steps) + "]");
  }
  const auto dtype = time_ff1_->weight.scalar_type();
  const auto basis = sinusoidal_features(t, config_.latent_dim).to(dtype);
  return time_ff2_(torch::silu(time_ff1_(basis)));
}

ConditionEmbedding MotionDenoiserImpl::embed_condition(const std::vector<Condition>& conditions,
                                                       std::mt19937_64* rng, double mask_prob) {
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw ValidationError("condition mask probability must lie in [0, 1]");
  if (mask_prob > 0.0 && !rng) throw ValidationError("condition masking needs an rng");
  ConditionEmbedding out;
  out.masked.assign(conditions.size(), false);
  const auto mode = config_.condition_mode;
  // z_tk depends on t only; whatever condition arrives is ignored.
  if (mode == ConditionMode::Unconditional) return out;
  for (const auto& c : conditions) {
    if (c.is_text() && mode != ConditionMode::Text) throw ValidationError("text condition given to a non-text model");
    if (c.is_action()) {
      if (mode != ConditionMode::Action) throw ValidationError("action condition given to a non-action model");
      if (c.class_id() >= config_.num_classes) {
        throw ValidationError("action class " + std::to_string(c.class_id()) + " outside [0, " +
                              std::to_string(config_.num_classes) + ")");
      }
    }
  }

  std::bernoulli_distribution coin(mask_prob);
  std::vector<torch::Tensor> rows;
  rows.reserve(conditions.size());
  for (std::size_t i = 0; i < conditions.size(); ++i) {
    const auto& c = conditions[i];
    if (mask_prob > 0.0) out.masked[i] = coin(*rng);
    if (out.masked[i] || c.is_null()) {
      rows.push_back(null_);
    } else if (c.is_action()) {
      rows.push_back(action_->weight[c.class_id()]);
    } else if (text_bag_) {
      const auto ids = hashed_tokens(c.prompt(), config_.text_slots);
      torch::Tensor bag = ids.empty() ? torch::zeros({config_.text_dim}, text_bag_->weight.options())
                                      : text_bag_(torch::tensor(ids, torch::kInt64)).mean(0);
      rows.push_back(text_proj_(bag));
    } else {
      const auto v = text_->embed(c.prompt());
      rows.push_back(text_proj_(torch::tensor(v).to(text_proj_->weight.scalar_type())));
    }
  }
  out.vectors = torch::stack(rows);
  return out;
}

torch::Tensor MotionDenoiserImpl::padding_mask(const std::vector<int>& lengths, std::int64_t batch,
                                               std::int64_t frames) const {
  if (lengths.empty()) return {};
  if (static_cast<std::int64_t>(lengths.size()) != batch) throw ShapeError("denoiser: one length per sequence");
  std::vector<std::uint8_t> pad(static_cast<std::size_t>(batch * frames), 0);
  bool any = false;
  for (std::int64_t b = 0; b < batch; ++b) {
    const int n = lengths[static_cast<std::size_t>(b)];
    if (n < 1 || n > frames) throw ValidationError("denoiser: sequence length outside [1, frames]");
    for (std::int64_t f = n; f < frames; ++f) pad[static_cast<std::size_t>(b * frames + f)] = 1;
    any = any || n < frames;
  }
  if (!any) return {};
  return torch::tensor(std::vector<std::int64_t>(pad.begin(), pad.end()), torch::kInt64)
      .view({batch, frames})
      .to(torch::kBool);
}

torch::Tensor MotionDenoiserImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t,
                                          const ConditionEmbedding& cond, const std::vector<int>& lengths) {
  if (x_t.dim() != 3 || x_t.size(2) != config_.feature_dim) {
    throw ShapeError("denoiser: expected x_t of shape [B, N, " + std::to_string(config_.feature_dim) + "]");
  }
  const auto B = x_t.size(0), N = x_t.size(1);
  if (N < 1 || N > config_.max_frames) {
    throw ValidationError("denoiser: " + std::to_string(N) + " frames exceeds max_frames " +
                          std::to_string(config_.max_frames));
  }
  if (t.dim() != 1 || t.size(0) != B) throw ShapeError("denoiser: one timestep per sequence");
  if (!torch::isfinite(x_t).all().item<bool>()) throw NumericError("denoiser: non-finite input");

  torch::Tensor z = embed_timestep(t);
  if (config_.condition_mode != ConditionMode::Unconditional) {
    if (!cond.vectors.defined() || cond.vectors.size(0) != B) throw ShapeError("denoiser: one condition per sequence");
    z = z + cond_ff_(cond.vectors);
  }
  z = z.unsqueeze(1);  // [B, 1, D]

  const torch::Tensor pad = padding_mask(lengths, B, N);
  auto frames = input_(x_t) + positional_.slice(0, 1, N + 1).to(x_t.scalar_type());
  torch::Tensor h;
  if (config_.backbone == Backbone::DecoderCrossAttention) {
    h = frames;
    for (const auto& layer : *layers_) h = layer->as<DecoderLayer>()->forward(h, pad, z);
  } else {
    const auto token = z + positional_.slice(0, 0, 1).to(x_t.scalar_type());
    h = torch::cat({token, frames}, 1);
    torch::Tensor seq_pad;
    if (pad.defined()) seq_pad = torch::cat({torch::zeros({B, 1}, pad.options()), pad}, 1);
    for (const auto& layer : *layers_) {
      if (config_.backbone == Backbone::Encoder) h = layer->as<EncoderLayer>()->forward(h, seq_pad);
      else h = layer->as<DecoderLayer>()->forward(h, seq_pad, z);
    }
    h = h.slice(1, 1);  // drop the z_tk output
  }
  auto out = output_(h);
  if (pad.defined()) out = out.masked_fill(pad.unsqueeze(-1), 0.0);
  return out;
}

MotionDenoiser make_denoiser(const DenoiserConfig& config, std::shared_ptr<const TextEmbedder> text) {
  torch::manual_seed(config.init_seed);
  return MotionDenoiser(config, std::move(text));
}

DenoiserX0Model::DenoiserX0Model(MotionDenoiser model) : model_(std::move(model)) { model_->eval(); }

torch::Tensor DenoiserX0Model::predict_x0(const torch::Tensor& x_t, int t,
                                          const std::vector<Condition>& conditions) const {
  torch::NoGradGuard no_grad;
  const auto tt = torch::full({x_t.size(0)}, t, torch::kInt64);
  return model_->forward(x_t, tt, model_->embed_condition(conditions));
}

std::vector<std::pair<std::string, torch::Tensor>> named_parameters(const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : module.named_parameters(true)) out.emplace_back(item.key(), item.value());
  return out;
}

}  // namespace mdm
