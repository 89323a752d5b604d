#include "mdm/diffusion.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mdm/error.hpp"

namespace mdm {

std::size_t EditMask::count_observed() const {
  std::size_t n = 0;
  for (auto v : data_) n += v;
  return n;
}

void EditSpec::validate() const {
  if (mask.frames() != reference.frames()) throw ShapeError("edit: mask and reference frame counts differ");
  if (mask.channels() != reference.dim()) throw ShapeError("edit: mask and reference channel counts differ");
  if (!mask.any()) throw ValidationError("edit: mask marks nothing as observed");
  if (!reference.features.allFinite()) throw NumericError("edit: reference motion has non-finite values");
}

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
  if (beta_.size() < 2) throw ValidationError("noise schedule needs at least 2 steps");
  alpha_bar_.reserve(beta_.size());
  double prod = 1.0;
  for (double b : beta_) {
    if (!(b > 0.0 && b < 1.0)) throw ValidationError("noise schedule: every beta must lie in (0, 1)");
    prod *= 1.0 - b;
    alpha_bar_.push_back(prod);
  }
}

std::size_t NoiseSchedule::index(int t) const {
  check_timestep(t);
  return static_cast<std::size_t>(t - 1);
}

void NoiseSchedule::check_timestep(int t) const {
  if (t < 1 || t > steps()) {
    throw ValidationError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  return alpha_bar_[index(t)];
}

double NoiseSchedule::posterior_variance(int t) const {
  return beta(t) * (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t));
}

std::pair<double, double> NoiseSchedule::posterior_mean_coefs(int t) const {
  const double denom = 1.0 - alpha_bar(t);
  return {std::sqrt(alpha_bar(t - 1)) * beta(t) / denom, std::sqrt(alpha(t)) * (1.0 - alpha_bar(t - 1)) / denom};
}

NoiseSchedule make_cosine_schedule(int steps) {
  if (steps < 2) throw ValidationError("cosine schedule: T must be at least 2");
  const auto f = [&](double t) {
    const double c = std::cos((t / steps + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2.0);
    return c * c;
  };
  const double f0 = f(0.0);
  std::vector<double> betas;
  betas.reserve(static_cast<std::size_t>(steps));
  for (int t = 1; t <= steps; ++t) {
    const double prev = f(t - 1.0) / f0;
    const double cur = f(static_cast<double>(t)) / f0;
    betas.push_back(std::min(1.0 - cur / prev, kMaxBeta));
  }
  return NoiseSchedule(std::move(betas));
}

torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& noise, const NoiseSchedule& schedule) {
  if (!x0.sizes().equals(noise.sizes())) throw ShapeError("q_sample: x0 and noise shapes differ");
  const double ab = schedule.alpha_bar(t);
  schedule.check_timestep(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& noise,
                       const NoiseSchedule& schedule) {
  if (!x0.sizes().equals(noise.sizes())) throw ShapeError("q_sample: x0 and noise shapes differ");
  if (t.dim() != 1 || t.size(0) != x0.size(0)) throw ShapeError("q_sample: need one timestep per batch element");
  const auto tv = t.to(torch::kInt64).contiguous();
  std::vector<double> a(static_cast<std::size_t>(tv.size(0))), b(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const int ti = static_cast<int>(tv[static_cast<std::int64_t>(i)].item<std::int64_t>());
    schedule.check_timestep(ti);
    a[i] = std::sqrt(schedule.alpha_bar(ti));
    b[i] = std::sqrt(1.0 - schedule.alpha_bar(ti));
  }
  std::vector<std::int64_t> shape(static_cast<std::size_t>(x0.dim()), 1);
  shape[0] = x0.size(0);
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  const auto ca = torch::tensor(a, opts).to(x0.scalar_type()).view(shape);
  const auto cb = torch::tensor(b, opts).to(x0.scalar_type()).view(shape);
  return ca * x0 + cb * noise;
}

torch::Tensor posterior_step(const torch::Tensor& x_t, const torch::Tensor& x0_hat, int t,
                             const NoiseSchedule& schedule, const torch::Tensor& noise) {
  schedule.check_timestep(t);
  if (!x_t.sizes().equals(x0_hat.sizes())) throw ShapeError("posterior_step: x_t and x0_hat shapes differ");
  const auto [c0, ct] = schedule.posterior_mean_coefs(t);
  torch::Tensor mean = c0 * x0_hat + ct * x_t;
  if (t == 1) return mean;
  if (!noise.sizes().equals(x_t.sizes())) throw ShapeError("posterior_step: noise shape differs from x_t");
  return mean + std::sqrt(schedule.posterior_variance(t)) * noise;
}

torch::Tensor guided_prediction(const torch::Tensor& pred_cond, const torch::Tensor& pred_uncond, double scale) {
  if (!pred_cond.sizes().equals(pred_uncond.sizes())) throw ShapeError("guided_prediction: shapes differ");
  if (scale == 1.0) return pred_cond.clone();
  if (scale == 0.0) return pred_uncond.clone();
  return pred_uncond + scale * (pred_cond - pred_uncond);
}

torch::Tensor reverse_diffusion(const X0Model& model, const std::vector<Condition>& conditions, int frames,
                                const NoiseSchedule& schedule, const ReverseProcessOptions& options) {
  if (conditions.empty()) throw ValidationError("sample: no conditions given");
  if (frames < 2 || frames > model.max_frames()) {
    throw ValidationError("sample: " + std::to_string(frames) + " frames outside [2, " +
                          std::to_string(model.max_frames()) + "]");
  }
  const auto B = static_cast<std::int64_t>(conditions.size());
  const std::int64_t F = model.feature_dim();
  const bool editing = options.edit_mask.defined();
  torch::Tensor reference, mask;
  if (editing) {
    if (options.edit_mask.size(0) != frames || options.edit_mask.size(1) != F ||
        !options.edit_reference.sizes().equals(options.edit_mask.sizes())) {
      throw ShapeError("sample: edit reference/mask must be [frames, F]");
    }
    reference = options.edit_reference.to(torch::kFloat32).unsqueeze(0);
    mask = options.edit_mask.to(torch::kBool).unsqueeze(0);
  }

  torch::NoGradGuard no_grad;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed);
  const auto opts = torch::TensorOptions().dtype(torch::kFloat32);
  torch::Tensor x = torch::randn({B, frames, F}, gen, opts);
  const std::vector<Condition> nulls(conditions.size(), Condition::null());
  const double s = options.guidance_scale;
  // With every condition null both branches coincide; G_s = G_uncond exactly.
  const bool all_null = std::all_of(conditions.begin(), conditions.end(), [](const Condition& c) { return c.is_null(); });

  for (int t = schedule.steps(); t >= 1; --t) {
    torch::Tensor x0_hat;
    if (s == 1.0 || all_null) {
      x0_hat = model.predict_x0(x, t, conditions);
    } else if (s == 0.0) {
      x0_hat = model.predict_x0(x, t, nulls);
    } else {
      x0_hat = guided_prediction(model.predict_x0(x, t, conditions), model.predict_x0(x, t, nulls), s);
    }
    if (editing) x0_hat = torch::where(mask, reference, x0_hat);
    torch::Tensor noise;
    if (t > 1) noise = torch::randn({B, frames, F}, gen, opts);
    x = posterior_step(x, x0_hat, t, schedule, noise);
    if (!torch::isfinite(x).all().item<bool>()) {
      throw NumericError("sample: non-finite values at diffusion step t = " + std::to_string(t));
    }
    if (options.on_step) options.on_step(t);
  }
  return x;
}

torch::Tensor to_tensor(const FeatureMatrix& m) {
  return torch::from_blob(const_cast<float*>(m.data()), {m.rows(), m.cols()}, torch::kFloat32).clone();
}

FeatureMatrix to_matrix(const torch::Tensor& t) {
  if (t.dim() != 2) throw ShapeError("to_matrix: expected a 2-D tensor");
  const auto c = t.to(torch::kFloat32).contiguous();
  FeatureMatrix m(c.size(0), c.size(1));
  std::memcpy(m.data(), c.data_ptr<float>(), static_cast<std::size_t>(m.size()) * sizeof(float));
  return m;
}

std::vector<MotionSequence> sample(const X0Model& model, const std::vector<Condition>& conditions, int frames,
                                   double guidance_scale, const NoiseSchedule& schedule, const DatasetStats& stats,
                                   std::uint64_t seed, const std::optional<EditSpec>& edit) {
  if (stats.dim() != model.feature_dim()) throw ShapeError("sample: stats width differs from model feature dim");
  ReverseProcessOptions opts;
  opts.guidance_scale = guidance_scale;
  opts.seed = seed;
  double fps = 20.0;
  std::string skeleton_ref;
  if (edit) {
    edit->validate();
    if (edit->reference.frames() != frames) throw ShapeError("sample: edit reference must have the requested frames");
    opts.edit_reference = to_tensor(normalize(edit->reference, stats).features);
    const auto& raw = edit->mask.raw();
    opts.edit_mask = torch::tensor(std::vector<std::int64_t>(raw.begin(), raw.end()), torch::kInt64)
                         .view({frames, edit->mask.channels()})
                         .to(torch::kBool);
    fps = edit->reference.fps;
    skeleton_ref = edit->reference.skeleton_ref;
  }
  const torch::Tensor x0 = reverse_diffusion(model, conditions, frames, schedule, opts);
  std::vector<MotionSequence> out;
  out.reserve(conditions.size());
  for (std::int64_t b = 0; b < x0.size(0); ++b) {
    MotionSequence m;
    m.features = to_matrix(x0[b]);
    m.fps = fps;
    m.skeleton_ref = skeleton_ref;
    out.push_back(denormalize(m, stats));
  }
  return out;
}

}  // namespace mdm
