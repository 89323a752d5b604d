#include "mdm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>

#include "mdm/error.hpp"
#include "mdm/hash.hpp"

namespace mdm {

namespace {

torch::Tensor qmul(const torch::Tensor& a, const torch::Tensor& b) {
  const auto aw = a.select(-1, 0), ax = a.select(-1, 1), ay = a.select(-1, 2), az = a.select(-1, 3);
  const auto bw = b.select(-1, 0), bx = b.select(-1, 1), by = b.select(-1, 2), bz = b.select(-1, 3);
  return torch::stack({aw * bw - ax * bx - ay * by - az * bz, aw * bx + ax * bw + ay * bz - az * by,
                       aw * by - ax * bz + ay * bw + az * bx, aw * bz + ax * by - ay * bx + az * bw},
                      -1);
}

// v + 2w (u x v) + 2 u x (u x v)
torch::Tensor qrot(const torch::Tensor& q, const torch::Tensor& v) {
  const auto w = q.select(-1, 0).unsqueeze(-1);
  const auto u = q.slice(-1, 1, 4);
  const auto uv = torch::cross(u, v.expand_as(u), -1);
  return v + 2.0 * w * uv + 2.0 * torch::cross(u, uv, -1);
}

torch::Tensor denorm(const torch::Tensor& x, const LossContext& ctx) {
  return x * ctx.std.to(x.scalar_type()) + ctx.mean.to(x.scalar_type());
}

// [B, N, J, 3] joint positions from metric-space features.
torch::Tensor joint_positions(const torch::Tensor& xm, const LossContext& ctx) {
  const auto& L = ctx.layout;
  const auto B = xm.size(0), N = xm.size(1);
  if (ctx.positions == PositionSource::PositionsOnly) {
    return xm.slice(-1, L.positions(), L.positions() + 3 * L.joints).reshape({B, N, L.joints, 3});
  }
  const auto quats = xm.slice(-1, L.rotations(), L.rotations() + 4 * L.joints).reshape({B, N, L.joints, 4});
  const auto root = xm.slice(-1, L.position(0), L.position(0) + 3);
  return fk_tensor(ctx.skeleton, quats, root);
}

torch::Tensor frame_weights(const torch::Tensor& valid, const torch::Tensor& x) {
  if (valid.defined()) {
    if (valid.dim() != 2 || valid.size(0) != x.size(0) || valid.size(1) != x.size(1)) {
      throw ShapeError("loss: valid mask must be [B, N]");
    }
    return valid.to(x.scalar_type());
  }
  return torch::ones({x.size(0), x.size(1)}, x.options());
}

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.dim() != 3 || !a.sizes().equals(b.sizes())) throw ShapeError(std::string(what) + ": expected equal [B, N, F]");
}

void check_context(const torch::Tensor& x, const LossContext& ctx) {
  if (x.size(2) != ctx.layout.dim()) throw ShapeError("loss: feature width differs from the layout");
  if (ctx.layout.joints != ctx.skeleton.num_joints()) throw ShapeError("loss: layout joints differ from skeleton");
}

}  // namespace

torch::Tensor fk_tensor(const Skeleton& skeleton, const torch::Tensor& quats, const torch::Tensor& root) {
  const int J = skeleton.num_joints();
  if (quats.dim() < 2 || quats.size(-2) != J || quats.size(-1) != 4) throw ShapeError("fk_tensor: quats must be [..., J, 4]");
  if (root.size(-1) != 3) throw ShapeError("fk_tensor: root must be [..., 3]");
  const auto q = quats / quats.norm(2, -1, true).clamp_min(1e-8);
  std::vector<torch::Tensor> global(static_cast<std::size_t>(J)), pos(static_cast<std::size_t>(J));
  const auto opts = quats.options();
  for (int j : skeleton.topological_order()) {
    const auto local = q.select(-2, j);
    const int p = skeleton.parent(j);
    if (p == kNoParent) {
      global[j] = local;
      pos[j] = root;
    } else {
      const auto& o = skeleton.offset(j);
      const auto off = torch::tensor({o.x(), o.y(), o.z()}, opts.dtype(torch::kFloat64)).to(quats.scalar_type());
      global[j] = qmul(global[p], local);
      pos[j] = pos[p] + qrot(global[p], off);
    }
  }
  return torch::stack(pos, -2);
}

void LossWeights::validate() const {
  if (!(lambda_pos >= 0.0) || !(lambda_vel >= 0.0) || !(lambda_foot >= 0.0)) {
    throw ValidationError("loss weights must be >= 0");
  }
}

nlohmann::json LossWeights::to_json() const {
  return {{"lambda_pos", lambda_pos}, {"lambda_vel", lambda_vel}, {"lambda_foot", lambda_foot}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.lambda_pos = j.at("lambda_pos").get<double>();
  w.lambda_vel = j.at("lambda_vel").get<double>();
  w.lambda_foot = j.at("lambda_foot").get<double>();
  w.validate();
  return w;
}

LossContext LossContext::identity(const Skeleton& skeleton, PositionSource source) {
  LossContext c;
  c.skeleton = skeleton;
  c.layout = FeatureLayout(skeleton);
  c.mean = torch::zeros({c.layout.dim()}, torch::kFloat64);
  c.std = torch::ones({c.layout.dim()}, torch::kFloat64);
  c.positions = source;
  return c;
}

LossContext LossContext::from_stats(const Skeleton& skeleton, const DatasetStats& stats, PositionSource source) {
  LossContext c;
  c.skeleton = skeleton;
  c.layout = FeatureLayout(skeleton);
  if (stats.dim() != c.layout.dim()) throw ShapeError("loss context: stats width differs from the layout");
  c.mean = torch::from_blob(const_cast<double*>(stats.mean.data()), {stats.dim()}, torch::kFloat64).clone();
  c.std = torch::from_blob(const_cast<double*>(stats.std.data()), {stats.dim()}, torch::kFloat64).clone();
  c.positions = source;
  return c;
}

torch::Tensor loss_simple(const torch::Tensor& x0, const torch::Tensor& x0_hat, const torch::Tensor& valid) {
  check_pair(x0, x0_hat, "loss_simple");
  const auto w = frame_weights(valid, x0);
  const auto sq = (x0 - x0_hat).pow(2).sum(-1);
  return (sq * w).sum() / (w.sum() * x0.size(2));
}

torch::Tensor loss_positions(const torch::Tensor& x0, const torch::Tensor& x0_hat, const LossContext& ctx,
                             const torch::Tensor& valid) {
  check_pair(x0, x0_hat, "loss_positions");
  check_context(x0, ctx);
  const auto p = joint_positions(denorm(x0, ctx), ctx);
  const auto ph = joint_positions(denorm(x0_hat, ctx), ctx);
  if (!torch::isfinite(ph).all().item<bool>() || !torch::isfinite(p).all().item<bool>()) {
    throw NumericError("loss_positions: non-finite FK output");
  }
  const auto w = frame_weights(valid, x0);
  const auto per_frame = (p - ph).pow(2).sum({-1, -2});
  return (per_frame * w).sum() / w.sum();
}

torch::Tensor loss_foot(const torch::Tensor& x0_hat, const torch::Tensor& contacts, const LossContext& ctx,
                        const torch::Tensor& valid) {
  if (x0_hat.dim() != 3) throw ShapeError("loss_foot: expected [B, N, F]");
  check_context(x0_hat, ctx);
  const auto B = x0_hat.size(0), N = x0_hat.size(1);
  const int K = ctx.skeleton.num_feet();
  if (N < 2) throw ShapeError("loss_foot: need at least 2 frames");
  if (contacts.dim() != 3 || contacts.size(0) != B || contacts.size(1) != N || contacts.size(2) != K) {
    throw ShapeError("loss_foot: contacts must be [B, N, feet]");
  }
  const auto ph = joint_positions(denorm(x0_hat, ctx), ctx);
  const auto& fj = ctx.skeleton.foot_joints();
  const auto feet = ph.index_select(2, torch::tensor(std::vector<std::int64_t>(fj.begin(), fj.end()), torch::kInt64));
  const auto d = feet.slice(1, 1) - feet.slice(1, 0, N - 1);  // [B, N-1, K, 3]
  const auto c = contacts.slice(1, 0, N - 1).to(x0_hat.scalar_type());
  const auto per_pair = (d.pow(2).sum(-1) * c).sum(-1);  // [B, N-1]
  const auto w = frame_weights(valid, x0_hat);
  const auto pw = w.slice(1, 1) * w.slice(1, 0, N - 1);
  return (per_pair * pw).sum() / pw.sum();
}

torch::Tensor loss_velocity(const torch::Tensor& x0, const torch::Tensor& x0_hat, const torch::Tensor& valid) {
  check_pair(x0, x0_hat, "loss_velocity");
  const auto N = x0.size(1);
  if (N < 2) throw ShapeError("loss_velocity: need at least 2 frames");
  const auto dx = x0.slice(1, 1) - x0.slice(1, 0, N - 1);
  const auto dh = x0_hat.slice(1, 1) - x0_hat.slice(1, 0, N - 1);
  const auto w = frame_weights(valid, x0);
  const auto pw = w.slice(1, 1) * w.slice(1, 0, N - 1);
  return ((dx - dh).pow(2).sum(-1) * pw).sum() / (pw.sum() * x0.size(2));
}

LossTerms total_loss(const torch::Tensor& x0, const torch::Tensor& x0_hat, const LossContext& ctx,
                     const LossWeights& weights, const torch::Tensor& valid) {
  weights.validate();
  check_pair(x0, x0_hat, "total_loss");
  check_context(x0, ctx);
  LossTerms t;
  t.simple = loss_simple(x0, x0_hat, valid);
  t.pos = loss_positions(x0, x0_hat, ctx, valid);
  t.vel = loss_velocity(x0, x0_hat, valid);
  const auto& L = ctx.layout;
  const auto gt = denorm(x0, ctx).slice(-1, L.contacts(), L.contacts() + L.feet);
  t.foot = loss_foot(x0_hat, (gt > 0.5).to(x0.scalar_type()), ctx, valid);
  t.total = t.simple + weights.lambda_pos * t.pos + weights.lambda_vel * t.vel + weights.lambda_foot * t.foot;
  return t;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ValidationError("train: batch size must be >= 1");
  if (!(learning_rate >= 0.0)) throw ValidationError("train: learning rate must be >= 0");
  if (total_steps < 1) throw ValidationError("train: steps must be >= 1");
  if (!(cfg_mask_prob >= 0.0 && cfg_mask_prob <= 1.0)) throw ValidationError("train: cfg mask prob must lie in [0, 1]");
  if (eval_interval < 0 || checkpoint_interval < 0 || log_interval < 1) {
    throw ValidationError("train: intervals must be >= 0 (log interval >= 1)");
  }
  loss_weights.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"total_steps", total_steps},
          {"cfg_mask_prob", cfg_mask_prob},
          {"seed", seed},
          {"eval_interval", eval_interval},
          {"checkpoint_interval", checkpoint_interval},
          {"log_interval", log_interval},
          {"loss_weights", loss_weights.to_json()},
          {"positions_only", positions_only},
          {"clip_norm", clip_norm}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.total_steps = j.at("total_steps").get<int>();
  c.cfg_mask_prob = j.at("cfg_mask_prob").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.eval_interval = j.at("eval_interval").get<int>();
  c.checkpoint_interval = j.at("checkpoint_interval").get<int>();
  c.log_interval = j.at("log_interval").get<int>();
  c.loss_weights = LossWeights::from_json(j.at("loss_weights"));
  c.positions_only = j.at("positions_only").get<bool>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.validate();
  return c;
}

nlohmann::json TrainLogEntry::to_json() const {
  return {{"step", step},           {"loss_simple", loss_simple}, {"loss_pos", loss_pos},
          {"loss_vel", loss_vel},   {"loss_foot", loss_foot},     {"total", total},
          {"lr", lr},               {"grad_norm", grad_norm},     {"wall_time", wall_time}};
}

CheckpointMeta checkpoint_meta(const LabeledDataset& dataset, const std::string& corpus_hash,
                               const TrainConfig& config, int step) {
  CheckpointMeta m;
  m.step = step;
  m.skeleton = dataset.skeleton;
  m.layout = dataset.layout;
  m.fps = dataset.fps;
  m.class_names = dataset.class_names;
  m.stats = dataset.stats;
  m.corpus_hash = corpus_hash;
  m.train_config = config.to_json();
  return m;
}

TrainResult train(MotionDenoiser& model, const LabeledDataset& dataset, const NoiseSchedule& schedule,
                  const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  dataset.validate();
  const auto& mc = model->config();
  if (dataset.train.empty()) throw ValidationError("train: dataset has no training clips");
  if (mc.feature_dim != dataset.layout.dim()) throw ValidationError("train: model feature_dim differs from the dataset");
  if (mc.diffusion_steps != schedule.steps()) throw ValidationError("train: model and schedule disagree on T");
  if (mc.condition_mode == ConditionMode::Action && mc.num_classes != dataset.num_classes()) {
    throw ValidationError("train: model num_classes differs from the dataset");
  }
  for (int i : dataset.train) {
    if (dataset.motions[i].frames() > mc.max_frames) throw ValidationError("train: clip longer than max_frames");
    if (mc.condition_mode == ConditionMode::Text && dataset.labels[i].captions.empty()) {
      throw ValidationError("train: text mode needs captions on every training clip");
    }
  }

  const std::string& corpus_hash = options.corpus_hash;
  const auto ctx = LossContext::from_stats(dataset.skeleton, dataset.stats,
                                           config.positions_only ? PositionSource::PositionsOnly
                                                                 : PositionSource::Rotations);
  std::vector<torch::Tensor> clips(dataset.size());
  for (int i : dataset.train) clips[i] = to_tensor(normalize(dataset.motions[i], dataset.stats).features);

  AdamConfig ac;
  ac.learning_rate = config.learning_rate;
  ac.clip_norm = config.clip_norm;
  Adam optim(named_parameters(*model), ac);
  if (options.resume_optimizer) optim.load_state(*options.resume_optimizer);

  const auto n = static_cast<std::int64_t>(dataset.train.size());
  std::int64_t perm_epoch = -1;
  std::vector<int> perm;
  const auto sample_index = [&](std::int64_t k) {
    const std::int64_t epoch = k / n;
    if (epoch != perm_epoch) {
      perm = dataset.train;
      std::mt19937_64 prng(split_seed(split_seed(config.seed, 0x5eed0001), static_cast<std::uint64_t>(epoch)));
      std::shuffle(perm.begin(), perm.end(), prng);
      perm_epoch = epoch;
    }
    return perm[static_cast<std::size_t>(k % n)];
  };

  const bool write = !options.out_dir.empty();
  std::ofstream log_file;
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    log_file.open(options.out_dir / "train_log.jsonl", options.start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!log_file) throw Error("cannot write " + (options.out_dir / "train_log.jsonl").string());
  }
  const auto save = [&](const std::string& name, int step, const nlohmann::json& metrics) {
    if (!write) return;
    auto meta = checkpoint_meta(dataset, corpus_hash, config, step);
    meta.metrics = metrics;
    const auto state = optim.state();
    save_checkpoint(options.out_dir / name, model, meta, &state);
  };

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  const auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  const int B = config.batch_size;
  const auto F = static_cast<std::int64_t>(mc.feature_dim);
  nlohmann::json best_metrics;

  for (int step = options.start_step + 1; step <= config.total_steps; ++step) {
    const std::uint64_t step_seed = split_seed(split_seed(config.seed, 0x5eed0002), static_cast<std::uint64_t>(step));
    std::mt19937_64 rng(step_seed);
    std::vector<int> idx(static_cast<std::size_t>(B));
    std::vector<int> lengths(static_cast<std::size_t>(B));
    int max_len = 0;
    for (int b = 0; b < B; ++b) {
      idx[b] = sample_index(static_cast<std::int64_t>(step - 1) * B + b);
      lengths[b] = dataset.motions[idx[b]].frames();
      max_len = std::max(max_len, lengths[b]);
    }
    auto x0 = torch::zeros({B, max_len, F});
    auto valid = torch::zeros({B, max_len});
    std::vector<Condition> conds;
    conds.reserve(static_cast<std::size_t>(B));
    std::uniform_int_distribution<int> tdist(1, schedule.steps());
    std::vector<std::int64_t> ts(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      x0[b].slice(0, 0, lengths[b]).copy_(clips[idx[b]]);
      valid[b].slice(0, 0, lengths[b]).fill_(1.0);
      const auto& label = dataset.labels[idx[b]];
      switch (mc.condition_mode) {
        case ConditionMode::Text: {
          std::uniform_int_distribution<std::size_t> pick(0, label.captions.size() - 1);
          conds.push_back(Condition::text(label.captions[pick(rng)]));
          break;
        }
        case ConditionMode::Action: conds.push_back(Condition::action(label.action)); break;
        case ConditionMode::Unconditional: conds.push_back(Condition::null()); break;
      }
      ts[b] = tdist(rng);
    }
    const auto t = torch::tensor(ts, torch::kInt64);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(split_seed(step_seed, 1));
    const auto noise = torch::randn({B, max_len, F}, gen, torch::TensorOptions().dtype(torch::kFloat32));
    const auto x_t = q_sample(x0, t, noise, schedule);
    torch::manual_seed(split_seed(step_seed, 2));  // dropout

    model->train();
    const auto cond = model->embed_condition(conds, &rng, config.cfg_mask_prob);
    const auto x0_hat = model->forward(x_t, t, cond, lengths);
    const auto terms = total_loss(x0, x0_hat, ctx, config.loss_weights, valid);
    const double total = terms.total.item<double>();
    if (!std::isfinite(total)) {
      std::ostringstream msg;
      msg << "training diverged at step " << step << ": loss_simple=" << terms.simple.item<double>()
          << " loss_pos=" << terms.pos.item<double>() << " loss_vel=" << terms.vel.item<double>()
          << " loss_foot=" << terms.foot.item<double>() << " t in [" << t.min().item<std::int64_t>() << ", "
          << t.max().item<std::int64_t>() << "]";
      throw NumericError(msg.str());
    }
    optim.zero_grad();
    terms.total.backward();
    const double grad_norm = optim.step();

    TrainLogEntry e;
    e.step = step;
    e.loss_simple = terms.simple.item<double>();
    e.loss_pos = terms.pos.item<double>();
    e.loss_vel = terms.vel.item<double>();
    e.loss_foot = terms.foot.item<double>();
    e.total = total;
    e.lr = config.learning_rate;
    e.grad_norm = grad_norm;
    e.wall_time = elapsed();
    result.steps = step;
    if (step % config.log_interval == 0 || step == options.start_step + 1 || step == config.total_steps) {
      result.log.push_back(e);
      if (write) log_file << e.to_json().dump() << '\n' << std::flush;
      if (options.on_log) options.on_log(e);
    }

    const bool last = step == config.total_steps;
    if (options.evaluate && ((config.eval_interval > 0 && step % config.eval_interval == 0) || last)) {
      model->eval();
      const double metric = options.evaluate(model, step);
      model->train();
      if (!result.best_metric || metric < *result.best_metric) {
        result.best_metric = metric;
        result.best_step = step;
        best_metrics = {{"eval_metric", metric}, {"eval_step", step}};
        save("best.ckpt", step, best_metrics);
      }
    }
    if (config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0) {
      save("step_" + std::to_string(step) + ".ckpt", step, nlohmann::json::object());
      save("last.ckpt", step, nlohmann::json::object());
    }
  }
  model->eval();
  result.wall_seconds = elapsed();
  const int final_step = std::max(result.steps, options.start_step);
  save("last.ckpt", final_step, {{"train_seconds", result.wall_seconds}});
  if (write && !options.evaluate) {
    std::filesystem::copy_file(options.out_dir / "last.ckpt", options.out_dir / "best.ckpt",
                               std::filesystem::copy_options::overwrite_existing);
  }
  return result;
}

}  // namespace mdm
