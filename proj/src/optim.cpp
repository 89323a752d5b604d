#include "mdm/optim.hpp"

#include <cmath>

#include "mdm/error.hpp"

namespace mdm {

void AdamConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ValidationError("adam: learning rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ValidationError("adam: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ValidationError("adam: eps must be > 0");
}

Adam::Adam(NamedTensors params, AdamConfig config) : params_(std::move(params)), config_(config) {
  config_.validate();
  for (const auto& [name, p] : params_) {
    m_.push_back(torch::zeros_like(p));
    v_.push_back(torch::zeros_like(p));
  }
}

void Adam::zero_grad() {
  for (auto& [name, p] : params_) {
    if (p.grad().defined()) p.mutable_grad().zero_();
  }
}

double Adam::step() {
  torch::NoGradGuard no_grad;
  double sq = 0.0;
  for (const auto& [name, p] : params_) {
    if (p.grad().defined()) sq += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
  }
  const double norm = std::sqrt(sq);
  const double scale = (config_.clip_norm > 0.0 && norm > config_.clip_norm) ? config_.clip_norm / (norm + 1e-6) : 1.0;

  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second;
    // A parameter without a gradient this step (e.g. an unused embedding
    // row set) is treated as having a zero gradient, so the optimizer state
    // depends on the step count only and resumed runs replay exactly.
    const auto g = !p.grad().defined() ? torch::zeros_like(p) : scale == 1.0 ? p.grad() : p.grad() * scale;
    m_[i].mul_(config_.beta1).add_(g, 1.0 - config_.beta1);
    v_[i].mul_(config_.beta2).addcmul_(g, g, 1.0 - config_.beta2);
    if (config_.learning_rate == 0.0) continue;
    const auto denom = (v_[i] / bc2).sqrt_().add_(config_.eps);
    p.addcdiv_(m_[i], denom, -config_.learning_rate / bc1);
  }
  return norm;
}

AdamState Adam::state() const {
  AdamState s;
  s.step = step_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    s.m.emplace_back(params_[i].first, m_[i].detach().clone());
    s.v.emplace_back(params_[i].first, v_[i].detach().clone());
  }
  return s;
}

void Adam::load_state(const AdamState& s) {
  if (s.m.size() != params_.size() || s.v.size() != params_.size()) {
    throw FormatError("optimizer state has " + std::to_string(s.m.size()) + " entries, model has " +
                      std::to_string(params_.size()));
  }
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, p] = params_[i];
    if (s.m[i].first != name || s.v[i].first != name) throw FormatError("optimizer state order mismatch at " + name);
    if (!s.m[i].second.sizes().equals(p.sizes()) || !s.v[i].second.sizes().equals(p.sizes())) {
      throw FormatError("optimizer state shape mismatch for " + name);
    }
    m_[i].copy_(s.m[i].second);
    v_[i].copy_(s.v[i].second);
  }
  step_ = s.step;
}

}  // namespace mdm
