#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdm/checkpoint.hpp"
#include "mdm/denoiser.hpp"
#include "mdm/diffusion.hpp"
#include "mdm/motion.hpp"
#include "mdm/optim.hpp"

namespace mdm {

// Differentiable FK on tensors. quats [..., J, 4] (w x y z, renormalized
// here), root [..., 3] -> positions [..., J, 3].
torch::Tensor fk_tensor(const Skeleton& skeleton, const torch::Tensor& quats, const torch::Tensor& root);

struct LossWeights {
  double lambda_pos = 0.0;
  double lambda_vel = 0.0;
  double lambda_foot = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

// How geometric losses read joint positions out of a (denormalized) feature
// tensor. Rotations: FK over the rotation channels with the root placed at the
// joint-0 position channels. PositionsOnly: FK is the identity and the
// position channels are used directly.
enum class PositionSource { Rotations, PositionsOnly };

struct LossContext {
  Skeleton skeleton = Skeleton::desk_default();
  FeatureLayout layout;
  torch::Tensor mean;  // [F]; geometric terms run on x * std + mean
  torch::Tensor std;   // [F]
  PositionSource positions = PositionSource::Rotations;

  static LossContext identity(const Skeleton& skeleton, PositionSource source = PositionSource::Rotations);
  static LossContext from_stats(const Skeleton& skeleton, const DatasetStats& stats,
                                PositionSource source = PositionSource::Rotations);
};

// x tensors are [B, N, F]; `valid` is an optional [B, N] float/bool mask of
// real (non-padded) frames.
torch::Tensor loss_simple(const torch::Tensor& x0, const torch::Tensor& x0_hat, const torch::Tensor& valid = {});
// Mean over frames of sum_j ||p_j - p^_j||^2, metric space.
torch::Tensor loss_positions(const torch::Tensor& x0, const torch::Tensor& x0_hat, const LossContext& ctx,
                             const torch::Tensor& valid = {});
// (1/(N-1)) sum_i sum_feet f_i ||p^_{i+1} - p^_i||^2; contacts [B, N, feet].
torch::Tensor loss_foot(const torch::Tensor& x0_hat, const torch::Tensor& contacts, const LossContext& ctx,
                        const torch::Tensor& valid = {});
// Mean over (N-1) x F entries of the squared difference of forward differences.
torch::Tensor loss_velocity(const torch::Tensor& x0, const torch::Tensor& x0_hat, const torch::Tensor& valid = {});

struct LossTerms {
  torch::Tensor simple, pos, vel, foot, total;
};

// L_simple + lambda_pos L_pos + lambda_vel L_vel + lambda_foot L_foot. x tensors
// are normalized; contacts come from the ground-truth x0 contact channels.
// Terms with a zero weight are still computed for logging.
LossTerms total_loss(const torch::Tensor& x0, const torch::Tensor& x0_hat, const LossContext& ctx,
                     const LossWeights& weights, const torch::Tensor& valid = {});

struct TrainConfig {
  int batch_size = 32;
  double learning_rate = 1e-4;
  int total_steps = 20000;
  double cfg_mask_prob = 0.1;
  std::uint64_t seed = 0;
  int eval_interval = 0;        // 0 = never
  int checkpoint_interval = 0;  // 0 = only last/best
  int log_interval = 10;
  LossWeights loss_weights;
  bool positions_only = false;  // geometric losses read position channels
  double clip_norm = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainLogEntry {
  int step = 0;
  double loss_simple = 0, loss_pos = 0, loss_vel = 0, loss_foot = 0, total = 0;
  double lr = 0, grad_norm = 0, wall_time = 0;
  nlohmann::json to_json() const;
};

// Lower is better; used to pick best.ckpt.
using EvalHook = std::function<double(MotionDenoiser& model, int step)>;

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::string corpus_hash;        // recorded in checkpoints
  EvalHook evaluate;
  std::function<void(const TrainLogEntry&)> on_log;
  const AdamState* resume_optimizer = nullptr;
  int start_step = 0;
};

struct TrainResult {
  int steps = 0;
  double wall_seconds = 0;
  std::vector<TrainLogEntry> log;
  std::optional<double> best_metric;
  int best_step = 0;
};

// Batches, timesteps, masking draws, noise and dropout are all functions of
// (seed, step), so a resumed run replays the uninterrupted one.
TrainResult train(MotionDenoiser& model, const LabeledDataset& dataset, const NoiseSchedule& schedule,
                  const TrainConfig& config, const TrainOptions& options = {});

CheckpointMeta checkpoint_meta(const LabeledDataset& dataset, const std::string& corpus_hash,
                               const TrainConfig& config, int step);

}  // namespace mdm
