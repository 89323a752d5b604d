#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace mdm {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping

  void validate() const;
};

struct AdamState {
  std::int64_t step = 0;
  NamedTensors m;
  NamedTensors v;
};

// Adaptive-moment update with bias correction and global grad-norm clipping.
class Adam {
 public:
  Adam(NamedTensors params, AdamConfig config);

  void zero_grad();
  // Clips and updates every parameter; returns the
  // pre-clipping global gradient norm.
  double step();

  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  AdamState state() const;
  void load_state(const AdamState& state);  // throws FormatError on name/shape mismatch

 private:
  NamedTensors params_;
  AdamConfig config_;
  std::int64_t step_ = 0;
  std::vector<torch::Tensor> m_, v_;
};

}  // namespace mdm
