#include "torch_doctest.hpp"

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "mdm/corpus.hpp"
#include "mdm/error.hpp"
#include "mdm/training.hpp"

using namespace mdm;

namespace {

Skeleton chain3() {
  return Skeleton({"root", "mid", "tip"}, {kNoParent, 0, 1}, {Vec3::Zero(), Vec3(0, 1, 0), Vec3(0, 1, 0)}, {2});
}

// [1, N, F] metric features for chain3 with identity rotations and the root
// at root[i]; contact channel set from `contact`.
torch::Tensor chain_motion(const std::vector<Vec3>& root, const std::vector<double>& contact) {
  const FeatureLayout L(3, 1);
  const auto N = static_cast<std::int64_t>(root.size());
  auto x = torch::zeros({1, N, L.dim()}, torch::kFloat64);
  for (std::int64_t i = 0; i < N; ++i) {
    for (int j = 0; j < 3; ++j) {
      x[0][i][L.rotation(j)] = 1.0;
      for (int k = 0; k < 3; ++k) x[0][i][L.position(j) + k] = root[i][k] + (k == 1 ? j : 0.0);
    }
    for (int k = 0; k < 3; ++k) x[0][i][L.position(0) + k] = root[i][k];
    x[0][i][L.contact(0)] = contact[i];
  }
  return x;
}

// Hand-assembled dataset: `per_family` clips of each family, all in train.
LabeledDataset small_corpus(int per_family, std::vector<std::string> families) {
  CorpusConfig c;
  LabeledDataset ds;
  ds.layout = FeatureLayout(ds.skeleton);
  ds.class_names = families;
  std::uint64_t seed = 100;
  for (int a = 0; a < static_cast<int>(families.size()); ++a) {
    for (int k = 0; k < per_family; ++k) {
      const auto clip = generate_clip(ds.skeleton, families[a], 20 + 2 * k, c.fps, c, seed++);
      ds.train.push_back(static_cast<int>(ds.motions.size()));
      ds.motions.push_back(clip.motion);
      ds.labels.push_back({a, families[a], clip.captions});
    }
  }
  ds.stats = DatasetStats::compute(ds.motions, ds.train);
  return ds;
}

DenoiserConfig small_model(const LabeledDataset& ds, int T) {
  DenoiserConfig c;
  c.latent_dim = 32;
  c.num_layers = 2;
  c.num_heads = 4;
  c.ff_dim = 64;
  c.max_frames = 30;
  c.feature_dim = ds.layout.dim();
  c.diffusion_steps = T;
  c.condition_mode = ConditionMode::Action;
  c.num_classes = ds.num_classes();
  c.init_seed = 1;
  return c;
}

}  // namespace

TEST_CASE("loss_simple fixtures") {
  const auto x = torch::randn({2, 5, 4}, torch::kFloat64);
  CHECK(loss_simple(x, x).item<double>() == 0.0);
  CHECK(loss_simple(torch::zeros({1, 3, 7}, torch::kFloat64), torch::ones({1, 3, 7}, torch::kFloat64)).item<double>() ==
        doctest::Approx(1.0).epsilon(1e-12));
  const auto y = torch::randn({2, 5, 4}, torch::kFloat64);
  double acc = 0;
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 5; ++i)
      for (int c = 0; c < 4; ++c) {
        const double d = x[b][i][c].item<double>() - y[b][i][c].item<double>();
        acc += d * d;
      }
  CHECK(std::abs(loss_simple(x, y).item<double>() - acc / 40.0) < 1e-12);
  CHECK_THROWS_AS(loss_simple(x, y.slice(1, 0, 4)), ShapeError);
}

TEST_CASE("loss_velocity fixtures") {
  const auto x = torch::tensor({0.0, 1.0}, torch::kFloat64).view({1, 2, 1});
  CHECK(loss_velocity(x, torch::tensor({0.0, 2.0}, torch::kFloat64).view({1, 2, 1})).item<double>() ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK(loss_velocity(x, torch::tensor({0.0, 3.0}, torch::kFloat64).view({1, 2, 1})).item<double>() ==
        doctest::Approx(4.0).epsilon(1e-12));
  const auto r = torch::randn({2, 6, 3}, torch::kFloat64);
  const auto offset = torch::randn({1, 1, 3}, torch::kFloat64);
  CHECK(std::abs(loss_velocity(r, r + offset).item<double>()) < 1e-12);
  CHECK(loss_velocity(r, r).item<double>() == 0.0);
  CHECK_THROWS_AS(loss_velocity(r.slice(1, 0, 1), r.slice(1, 0, 1)), ShapeError);
}

TEST_CASE("loss_positions: root translation by v gives J |v|^2") {
  const auto ctx = LossContext::identity(chain3());
  std::vector<Vec3> root{{0, 1, 0}, {0.5, 1, 0.25}, {1, 1.1, 0.5}, {1.5, 1, 0.75}};
  const Vec3 v(0.5, -1.0, 2.0);
  std::vector<Vec3> shifted;
  for (const auto& r : root) shifted.push_back(r + v);
  const auto x = chain_motion(root, {1, 1, 0, 0});
  const auto xh = chain_motion(shifted, {1, 1, 0, 0});
  CHECK(loss_positions(x, x, ctx).item<double>() == 0.0);
  CHECK(loss_positions(x, xh, ctx).item<double>() == doctest::Approx(3 * v.squaredNorm()).epsilon(1e-12));
  // identity-FK mode reads the position channels: same answer here
  const auto pctx = LossContext::identity(chain3(), PositionSource::PositionsOnly);
  CHECK(loss_positions(x, xh, pctx).item<double>() == doctest::Approx(3 * v.squaredNorm()).epsilon(1e-12));
}

TEST_CASE("positions-only loss is the per-frame squared error of the position channels") {
  const auto ctx = LossContext::identity(chain3(), PositionSource::PositionsOnly);
  const FeatureLayout L(3, 1);
  const auto x = torch::randn({2, 4, L.dim()}, torch::kFloat64);
  const auto y = torch::randn({2, 4, L.dim()}, torch::kFloat64);
  const auto d = (x - y).slice(-1, L.positions(), L.positions() + 9);
  CHECK(std::abs(loss_positions(x, y, ctx).item<double>() - d.pow(2).sum().item<double>() / 8.0) < 1e-12);
}

TEST_CASE("loss_foot fixtures") {
  const auto ctx = LossContext::identity(chain3());
  const double d = 0.3;
  const auto sliding = chain_motion({{0, 0, 0}, {d, 0, 0}, {2 * d, 0, 0}}, {1, 0, 0});
  const auto one_contact = torch::tensor({1.0, 0.0, 0.0}, torch::kFloat64).view({1, 3, 1});
  CHECK(loss_foot(sliding, one_contact, ctx).item<double>() == doctest::Approx(d * d / 2.0).epsilon(1e-12));
  CHECK(loss_foot(sliding, torch::zeros({1, 3, 1}, torch::kFloat64), ctx).item<double>() == 0.0);
  const auto still = chain_motion({{0, 0, 0}, {0, 0, 0}, {0, 0, 0}}, {1, 1, 1});
  CHECK(loss_foot(still, torch::ones({1, 3, 1}, torch::kFloat64), ctx).item<double>() == 0.0);
  CHECK_THROWS_AS(loss_foot(sliding, torch::ones({1, 2, 1}, torch::kFloat64), ctx), ShapeError);
}

TEST_CASE("total_loss is the weighted sum of its terms") {
  const auto ctx = LossContext::identity(chain3());
  const auto x = chain_motion({{0, 0, 0}, {0.1, 0, 0}, {0.2, 0, 0}}, {1, 1, 0});
  const auto xh = chain_motion({{0, 0.1, 0}, {0.4, 0, 0}, {0.5, 0, 0.2}}, {1, 0, 0});
  const auto t0 = total_loss(x, xh, ctx, {0, 0, 0});
  CHECK(t0.total.item<double>() == t0.simple.item<double>());
  const auto t1 = total_loss(x, xh, ctx, {1, 1, 1});
  const double sum = loss_simple(x, xh).item<double>() + loss_positions(x, xh, ctx).item<double>() +
                     loss_velocity(x, xh).item<double>() +
                     loss_foot(xh, torch::tensor({1.0, 1.0, 0.0}, torch::kFloat64).view({1, 3, 1}), ctx).item<double>();
  CHECK(std::abs(t1.total.item<double>() - sum) < 1e-10);
  const auto same = total_loss(x, x, ctx, {1, 1, 1});
  CHECK(same.simple.item<double>() == 0.0);
  CHECK(same.pos.item<double>() == 0.0);
  CHECK(same.vel.item<double>() == 0.0);
  // the clean foot itself moves 0.1 per frame on two contact frames
  CHECK(same.foot.item<double>() == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(t1.simple.item<double>() > 0.0);
  CHECK(t1.pos.item<double>() > 0.0);
  CHECK(t1.vel.item<double>() > 0.0);
  CHECK(t1.foot.item<double>() > 0.0);
  CHECK_THROWS_AS(total_loss(x, xh, ctx, {-1, 0, 0}), ValidationError);
}

TEST_CASE("padded frames are excluded from every loss") {
  const auto ctx = LossContext::identity(chain3());
  const auto x = chain_motion({{0, 0, 0}, {0.1, 0, 0}, {0.2, 0, 0}, {0.3, 0, 0}}, {1, 1, 0, 0});
  auto xh = chain_motion({{0, 0.1, 0}, {0.4, 0, 0}, {0.5, 0, 0.2}, {0.7, 0, 0}}, {1, 0, 0, 0});
  const auto ref = total_loss(x.slice(1, 0, 3), xh.slice(1, 0, 3), ctx, {1, 1, 1});
  xh[0][3] += 100.0;
  const auto valid = torch::tensor({1.0, 1.0, 1.0, 0.0}, torch::kFloat64).view({1, 4});
  const auto masked = total_loss(x, xh, ctx, {1, 1, 1}, valid);
  CHECK(std::abs(masked.total.item<double>() - ref.total.item<double>()) < 1e-10);
}

TEST_CASE("tensor FK agrees with the reference FK") {
  const Skeleton s = Skeleton::desk_default();
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  PoseRotations pose(5, s.num_joints());
  auto quats = torch::zeros({5, s.num_joints(), 4}, torch::kFloat64);
  auto root = torch::zeros({5, 3}, torch::kFloat64);
  for (int f = 0; f < 5; ++f) {
    pose.root_translation[f] = Vec3(g(rng), g(rng), g(rng));
    for (int k = 0; k < 3; ++k) root[f][k] = pose.root_translation[f][k];
    for (int j = 0; j < s.num_joints(); ++j) {
      Quat q(g(rng), g(rng), g(rng), g(rng));
      q.normalize();
      pose.at(f, j) = q;
      quats[f][j][0] = q.w();
      quats[f][j][1] = q.x();
      quats[f][j][2] = q.y();
      quats[f][j][3] = q.z();
    }
  }
  const auto ref = forward_kinematics(s, pose);
  const auto got = fk_tensor(s, quats * 3.0, root);  // scale is normalized away
  for (int f = 0; f < 5; ++f)
    for (int j = 0; j < s.num_joints(); ++j)
      for (int k = 0; k < 3; ++k) CHECK(std::abs(got[f][j][k].item<double>() - ref.at(f, j)[k]) < 1e-12);
}

TEST_CASE("analytic gradients match finite differences") {
  const auto r = testing::gradient_check(chain3(), 2);
  MESSAGE("max rel " << r.max_rel << ", global rel " << r.global_rel << " over " << r.checked << " entries");
  CHECK(r.checked > 1000);
  CHECK(r.max_rel < 1e-4);
  CHECK(r.global_rel < 1e-6);
}

TEST_CASE("training: zero learning rate leaves parameters untouched") {
  const auto ds = small_corpus(3, {"walk", "squat"});
  const auto sched = make_cosine_schedule(50);
  auto model = make_denoiser(small_model(ds, 50));
  std::vector<torch::Tensor> before;
  for (auto& [n, p] : named_parameters(*model)) before.push_back(p.detach().clone());
  TrainConfig tc;
  tc.batch_size = 4;
  tc.total_steps = 5;
  tc.learning_rate = 0.0;
  tc.loss_weights = {1, 1, 1};
  train(model, ds, sched, tc);
  const auto after = named_parameters(*model);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(torch::equal(before[i], after[i].second));
}

TEST_CASE("training is deterministic and resumable") {
  const auto ds = small_corpus(3, {"walk", "wave", "kick"});
  const auto sched = make_cosine_schedule(50);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.total_steps = 12;
  tc.log_interval = 1;
  tc.learning_rate = 1e-3;
  tc.loss_weights = {1, 1, 1};
  tc.seed = 8;
  auto a = make_denoiser(small_model(ds, 50));
  auto b = make_denoiser(small_model(ds, 50));
  const auto ra = train(a, ds, sched, tc);
  const auto rb = train(b, ds, sched, tc);
  REQUIRE(ra.log.size() == 12);
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    CHECK(ra.log[i].total == rb.log[i].total);
    CHECK(ra.log[i].loss_simple == rb.log[i].loss_simple);
    const auto& e = ra.log[i];
    CHECK(std::abs(e.loss_simple + e.loss_pos + e.loss_vel + e.loss_foot - e.total) <= 1e-6 * std::max(1.0, e.total));
  }

  // 6 steps, checkpoint, then resume for the remaining 6
  const auto dir = std::filesystem::temp_directory_path() / "mdm_test_resume";
  std::filesystem::remove_all(dir);
  auto c = make_denoiser(small_model(ds, 50));
  TrainConfig half = tc;
  half.total_steps = 6;
  TrainOptions opts;
  opts.out_dir = dir;
  train(c, ds, sched, half, opts);
  CHECK(std::filesystem::exists(dir / "train_log.jsonl"));
  auto loaded = load_checkpoint(dir / "last.ckpt");
  REQUIRE(loaded.optimizer.has_value());
  TrainOptions resume;
  resume.start_step = 6;
  resume.resume_optimizer = &*loaded.optimizer;
  auto rc = train(loaded.model, ds, sched, tc, resume);
  const auto pa = named_parameters(*a), pc = named_parameters(*loaded.model);
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(torch::equal(pa[i].second, pc[i].second));
  std::filesystem::remove_all(dir);
}

TEST_CASE("overfitting four clips reduces the simple loss tenfold") {
  const auto ds = small_corpus(1, {"walk", "squat", "jump-in-place", "raise-arms"});
  const auto sched = make_cosine_schedule(100);
  auto cfg = small_model(ds, 100);
  cfg.dropout = 0.0;
  auto model = make_denoiser(cfg);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.total_steps = 200;
  tc.log_interval = 1;
  tc.learning_rate = 2e-3;
  tc.cfg_mask_prob = 0.0;
  tc.seed = 2;
  const auto r = train(model, ds, sched, tc);
  double tail = 0;
  for (std::size_t i = r.log.size() - 10; i < r.log.size(); ++i) tail += r.log[i].loss_simple / 10.0;
  MESSAGE("step 1 loss " << r.log.front().loss_simple << ", last-10 mean " << tail);
  CHECK(tail * 10.0 <= r.log.front().loss_simple);
}

TEST_CASE("training rejects inconsistent setups") {
  const auto ds = small_corpus(2, {"walk", "wave"});
  auto model = make_denoiser(small_model(ds, 50));
  TrainConfig tc;
  tc.total_steps = 1;
  CHECK_THROWS_AS(train(model, ds, make_cosine_schedule(60), tc), ValidationError);
  tc.batch_size = 0;
  CHECK_THROWS_AS(train(model, ds, make_cosine_schedule(50), tc), ValidationError);
}
