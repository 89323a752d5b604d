#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "mdm/edit_types.hpp"
#include "mdm/motion.hpp"

namespace mdm {

// Timesteps are 1-based: t in [1, T]; alpha_bar(0) = 1 by convention.
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> betas);

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_[index(t)]; }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const;
  // beta~_t = beta_t (1 - abar_{t-1}) / (1 - abar_t)
  double posterior_variance(int t) const;
  // Coefficients of x0_hat and x_t in the posterior mean mu~_t.
  std::pair<double, double> posterior_mean_coefs(int t) const;
  void check_timestep(int t) const;

 private:
  std::size_t index(int t) const;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kMaxBeta = 0.999;

// abar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2), s = 0.008;
// betas clipped at 0.999.
NoiseSchedule make_cosine_schedule(int steps);

// sqrt(abar_t) x0 + sqrt(1 - abar_t) noise. t is a scalar or a per-batch
// int64 tensor of shape [B] broadcast over the remaining dims.
torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& noise, const NoiseSchedule& schedule);
torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& noise,
                       const NoiseSchedule& schedule);

// mu~_t(x_t, x0_hat) + 1{t>1} sqrt(beta~_t) noise.
torch::Tensor posterior_step(const torch::Tensor& x_t, const torch::Tensor& x0_hat, int t,
                             const NoiseSchedule& schedule, const torch::Tensor& noise);

// G_uncond + s (G_cond - G_uncond); s = 0 and s = 1 return the inputs exactly.
torch::Tensor guided_prediction(const torch::Tensor& pred_cond, const torch::Tensor& pred_uncond, double scale);

// Anything that predicts the clean sample x0_hat in normalized feature space.
class X0Model {
 public:
  virtual ~X0Model() = default;
  virtual int feature_dim() const = 0;
  virtual int max_frames() const = 0;
  // x_t: [B, N, F]; one condition per batch element (Null = unconditioned).
  virtual torch::Tensor predict_x0(const torch::Tensor& x_t, int t, const std::vector<Condition>& conditions) const = 0;
};

struct ReverseProcessOptions {
  double guidance_scale = 2.5;
  std::uint64_t seed = 0;
  // Normalized reference [N, F] and boolean mask [N, F], broadcast over the batch.
  torch::Tensor edit_reference;
  torch::Tensor edit_mask;
  std::function<void(int t)> on_step;
};

// Draws x_T ~ N(0, I) of shape [B, frames, F] and iterates t = T..1. Each step
// blends conditional and unconditional predictions, overwrites the
// observed entries of x0_hat when an edit is given, then applies
// posterior_step. Returns x_0 in normalized space.
torch::Tensor reverse_diffusion(const X0Model& model, const std::vector<Condition>& conditions, int frames,
                                const NoiseSchedule& schedule, const ReverseProcessOptions& options);

// Motion-level sampler: one output per condition, all with `frames` frames,
// denormalized with `stats`.
std::vector<MotionSequence> sample(const X0Model& model, const std::vector<Condition>& conditions, int frames,
                                   double guidance_scale, const NoiseSchedule& schedule, const DatasetStats& stats,
                                   std::uint64_t seed, const std::optional<EditSpec>& edit = std::nullopt);

// Row-major [N, F] float tensor views of motions.
torch::Tensor to_tensor(const FeatureMatrix& m);
FeatureMatrix to_matrix(const torch::Tensor& t);  // expects [N, F]

}  // namespace mdm
