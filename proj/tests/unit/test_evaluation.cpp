#include "torch_doctest.hpp"

#include <filesystem>
#include <random>

#include "mdm/corpus.hpp"
#include "mdm/error.hpp"
#include "mdm/evaluation.hpp"

using namespace mdm;

namespace {

Eigen::MatrixXd gaussian(int n, const Eigen::VectorXd& mu, const Eigen::MatrixXd& cov, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  const Eigen::MatrixXd L = cov.llt().matrixL();
  Eigen::MatrixXd out(n, mu.size());
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd z(mu.size());
    for (int k = 0; k < z.size(); ++k) z[k] = nd(rng);
    out.row(i) = (mu + L * z).transpose();
  }
  return out;
}

Eigen::MatrixXd uniform_features(int n, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) m(i, k) = nd(rng);
  return m;
}

LabeledDataset small_dataset() {
  CorpusConfig cc;
  cc.families = {"walk", "jump-in-place", "wave", "squat"};
  cc.per_family = 16;
  return generate_procedural_corpus(cc, 5);
}

DenoiserConfig tiny_text_config(int feature_dim) {
  DenoiserConfig dc;
  dc.latent_dim = 16;
  dc.num_layers = 1;
  dc.num_heads = 2;
  dc.ff_dim = 32;
  dc.max_frames = 64;
  dc.feature_dim = feature_dim;
  dc.diffusion_steps = 8;
  dc.condition_mode = ConditionMode::Text;
  return dc;
}

}  // namespace

TEST_CASE("fid: identity, symmetry and closed forms") {
  const auto a = uniform_features(500, 3, 1);
  const Eigen::MatrixXd b = uniform_features(400, 3, 2) * 1.5;
  CHECK(fid(a, a) <= 1e-6);
  CHECK(std::abs(fid(a, b) - fid(b, a)) <= 1e-6);
  CHECK(fid(a, b) >= 0.0);

  // N(0,1) vs N(1,1): ||mu1 - mu2||^2 = 1, covariance terms cancel.
  Eigen::VectorXd m0(1), m1(1);
  m0 << 0.0;
  m1 << 1.0;
  const Eigen::MatrixXd one = Eigen::MatrixXd::Identity(1, 1);
  CHECK(fid(gaussian(100000, m0, one, 3), gaussian(100000, m1, one, 4)) == doctest::Approx(1.0).epsilon(0.02));

  // 2-D: for a 2x2 M with positive eigenvalues, tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)).
  Eigen::Vector2d mu1(0.0, 0.0), mu2(1.0, -1.0);
  Eigen::Matrix2d s1, s2;
  s1 << 1.0, 0.5, 0.5, 2.0;
  s2 << 2.0, -0.3, -0.3, 0.5;
  const Eigen::Matrix2d prod = s1 * s2;
  const double tr_sqrt = std::sqrt(prod.trace() + 2.0 * std::sqrt(prod.determinant()));
  const double closed = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
  const double empirical = fid(gaussian(100000, mu1, s1, 5), gaussian(100000, mu2, s2, 6));
  CHECK(std::abs(empirical - closed) <= 0.02 * closed);

  // fewer samples than dimensions still works (ridge on the diagonal)
  CHECK(std::isfinite(fid(uniform_features(2, 8, 7), uniform_features(3, 8, 8))));
  CHECK_THROWS_AS(fid(Eigen::MatrixXd(0, 3), a), ValidationError);
  CHECK_THROWS_AS(fid(a, uniform_features(10, 4, 9)), ShapeError);
}

TEST_CASE("diversity") {
  std::mt19937_64 rng(0);
  CHECK(diversity(Eigen::MatrixXd::Constant(20, 4, 3.0), 10, rng) == 0.0);
  CHECK_THROWS_AS(diversity(Eigen::MatrixXd::Zero(19, 4), 10, rng), ValidationError);

  // points {0, 0, d, d}: of the three perfect matchings, two pair across -> E = 2d/3
  const double d = 2.0;
  Eigen::MatrixXd four(4, 1);
  four << 0.0, 0.0, d, d;
  double sum = 0.0;
  const int draws = 30000;
  for (int i = 0; i < draws; ++i) sum += diversity(four, 2, rng);
  CHECK(sum / draws == doctest::Approx(2.0 * d / 3.0).epsilon(0.01));

  const auto f = uniform_features(100, 5, 3);
  std::mt19937_64 r1(42), r2(42);
  CHECK(diversity(f, 50, r1) == diversity(f, 50, r2));
}

TEST_CASE("multimodality") {
  std::mt19937_64 rng(1);
  CHECK(multimodality({Eigen::MatrixXd::Constant(5, 3, 1.0), Eigen::MatrixXd::Constant(4, 3, -2.0)}, 10, rng) == 0.0);
  Eigen::MatrixXd pair(2, 2);
  pair << 0.0, 0.0, 3.0, 4.0;
  CHECK(multimodality({pair}, 7, rng) == doctest::Approx(5.0));
  Eigen::MatrixXd other(2, 2);
  other << 1.0, 1.0, 1.0, 2.0;
  CHECK(multimodality({pair, other}, 3, rng) == multimodality({other, pair}, 3, rng));
  CHECK_THROWS_AS(multimodality({pair, Eigen::MatrixXd::Zero(1, 2)}, 3, rng), ValidationError);
  CHECK_THROWS_AS(multimodality({}, 3, rng), ValidationError);
}

TEST_CASE("r-precision") {
  std::mt19937_64 rng(2);
  const auto f = uniform_features(64, 8, 11);
  const auto same = r_precision(f, f, 32, rng);
  CHECK(same[0] == 1.0);
  CHECK(same[2] == 1.0);

  const auto m = uniform_features(32000, 8, 12), t = uniform_features(32000, 8, 13);
  const auto chance = r_precision(m, t, 32, rng);
  CHECK(std::abs(chance[2] - 3.0 / 32.0) <= 0.01);
  CHECK(std::abs(chance[0] - 1.0 / 32.0) <= 0.01);
  CHECK(chance[0] <= chance[1]);
  CHECK(chance[1] <= chance[2]);

  const Eigen::MatrixXd noisy = f + 0.8 * uniform_features(64, 8, 14);
  const auto mid = r_precision(noisy, f, 32, rng);
  CHECK(mid[0] <= mid[1]);
  CHECK(mid[1] <= mid[2]);
  CHECK_THROWS_AS(r_precision(uniform_features(31, 8, 1), uniform_features(31, 8, 2), 32, rng), ValidationError);
  CHECK_THROWS_AS(r_precision(f, uniform_features(63, 8, 2), 32, rng), ShapeError);
}

TEST_CASE("multimodal distance") {
  const auto f = uniform_features(10, 3, 1);
  CHECK(multimodal_distance(f, f) == 0.0);
  Eigen::MatrixXd a(1, 2), b(1, 2);
  a << 0.0, 0.0;
  b << 0.0, 2.0;
  CHECK(multimodal_distance(a, b) == doctest::Approx(2.0));
  Eigen::MatrixXd m(3, 2), t(3, 2);
  m << 0, 0, 1, 1, 0, 0;
  t << 3, 4, 1, 1, 0, 1;
  CHECK(multimodal_distance(m, t) == doctest::Approx((5.0 + 0.0 + 1.0) / 3.0));
  CHECK_THROWS_AS(multimodal_distance(m, f), ShapeError);
}

TEST_CASE("recognition accuracy, spearman and summaries") {
  CHECK(recognition_accuracy({0, 1, 2, 2}, {0, 1, 1, 2}, 3) == doctest::Approx(0.75));
  CHECK_THROWS_AS(recognition_accuracy({0}, {3}, 3), ValidationError);
  CHECK_THROWS_AS(recognition_accuracy({0, 1}, {0}, 3), ShapeError);

  CHECK(spearman({0, 1, 1.5, 2.5}, {0.1, 0.2, 0.5, 0.9}) == doctest::Approx(1.0));
  CHECK(spearman({0, 1, 2, 3}, {5, 4, 1, 0}) == doctest::Approx(-1.0));
  // ties take average ranks: x ranks (1, 2.5, 2.5, 4)
  CHECK(spearman({1, 2, 2, 3}, {1, 2, 3, 4}) == doctest::Approx(4.5 / std::sqrt(4.5 * 5.0)));
  CHECK(spearman({1, 1, 1}, {1, 2, 3}) == 0.0);

  const auto s = summarize({1.0, 2.0, 3.0});
  CHECK(s.value == doctest::Approx(2.0));
  CHECK(s.half_width == doctest::Approx(1.96 / std::sqrt(3.0)));
  CHECK(s.reps == 3);
  CHECK(summarize({4.0}).half_width == 0.0);
  CHECK_THROWS_AS(summarize({}), ValidationError);
}

TEST_CASE("foot skate") {
  const Skeleton s = Skeleton::desk_default();
  const int n = 11;
  JointPositions p(n, s.num_joints());
  ContactMask c(n, s.num_feet());
  CHECK(foot_skate(p, s, c) == 0.0);  // no contacts
  for (int i = 0; i < n; ++i) c.at(i, 0) = 1;
  CHECK(foot_skate(p, s, c) == 0.0);  // planted
  const int foot = s.foot_joints()[0];
  for (int i = 0; i < n; ++i) p.at(i, foot) = Vec3(0.02 * i, 0.3 * (i % 2), 0.0);  // vertical motion is ignored
  CHECK(foot_skate(p, s, c) == doctest::Approx(0.02));
  CHECK_THROWS_AS(foot_skate(JointPositions(1, s.num_joints()), s, ContactMask(1, 2)), ValidationError);
  CHECK_THROWS_AS(foot_skate(p, s, ContactMask(n, 1)), ShapeError);
}

TEST_CASE("frame velocity percentile") {
  MotionSequence m;
  m.features = FeatureMatrix(5, 2);
  m.features << 0, 0, 1, 0, 3, 0, 6, 0, 10, 0;
  const auto p = frame_velocity_percentile({m}, {0}, 1.0);
  CHECK(p[0] == doctest::Approx(4.0));
  CHECK(p[1] == 0.0);
  CHECK(frame_velocity_percentile({m}, {0}, 0.0)[0] == doctest::Approx(1.0));
}

TEST_CASE("eval report") {
  EvalReport r;
  r.metrics["fid"] = {1.5, 0.1, 20};
  r.metrics["diversity"] = {3.0, 0.2, 20};
  const auto j = r.to_json();
  CHECK(j["metrics"]["fid"]["half_width"].get<double>() == 0.1);
  CHECK(r.table().find("diversity") != std::string::npos);
  r.validate();
  r.metrics["bad"] = {std::nan(""), 0.0, 1};
  CHECK_THROWS_AS(r.validate(), NumericError);
}

TEST_CASE("evaluators: training, persistence and feature invariants") {
  const auto ds = small_dataset();
  EvaluatorConfig ec;
  ec.classifier_steps = 150;
  ec.embedder_steps = 150;
  ec.batch_size = 32;
  const auto ev = Evaluators::train(ds, ec);
  CHECK(ev.test_accuracy() >= 0.75);

  std::vector<MotionSequence> test;
  std::vector<int> labels;
  for (int idx : ds.test) {
    test.push_back(ds.motions[idx]);
    labels.push_back(ds.labels[idx].action);
  }
  CHECK(recognition_accuracy(ev.classify(test), labels, ds.num_classes()) == doctest::Approx(ev.test_accuracy()));
  auto shuffled = labels;
  std::rotate(shuffled.begin(), shuffled.begin() + 3, shuffled.end());
  CHECK(recognition_accuracy(ev.classify(test), shuffled, ds.num_classes()) <= 0.5);

  // a clip's features do not depend on what it is batched with
  const auto alone = ev.motion_features({test[0]});
  const auto batched = ev.motion_features(test);
  CHECK((alone.row(0) - batched.row(0)).cwiseAbs().maxCoeff() <= 1e-5);
  const auto jm = ev.joint_motion_features(test);
  const auto jt = ev.joint_text_features({ds.labels[ds.test[0]].captions[0]});
  CHECK(jm.cols() == jt.cols());
  CHECK(jm.row(0).norm() == doctest::Approx(1.0));

  const auto path = std::filesystem::temp_directory_path() / "mdm_test_eval.ckpt";
  ev.save(path);
  const auto back = Evaluators::load(path);
  CHECK((back.motion_features(test) - batched).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.test_accuracy() == ev.test_accuracy());
  std::filesystem::remove(path);

  MotionSequence wrong;
  wrong.features = FeatureMatrix::Zero(10, 7);
  CHECK_THROWS_AS(ev.motion_features({wrong}), ShapeError);

  SUBCASE("scoring real clips as a generated pool") {
    GeneratedPool pool;
    for (int idx : ds.test) {
      pool.motions.push_back(ds.motions[idx]);
      pool.conditions.push_back(Condition::text(ds.labels[idx].captions[0]));
      pool.group.push_back(ds.labels[idx].action);
      pool.intended.push_back(ds.labels[idx].action);
      pool.primary.push_back(true);
    }
    EvalConfig cfg;
    cfg.reps = 4;
    cfg.rprecision_pool = 8;
    const auto report = score_pool(pool, ConditionMode::Text, ds, ev, cfg);
    for (const char* name : {"fid", "diversity", "multimodality", "r_precision_top1", "r_precision_top3",
                             "multimodal_dist", "foot_skate"})
      CHECK(report.metrics.count(name) == 1);
    CHECK(report.metrics.at("fid").reps == 4);
    CHECK(report.metrics.at("r_precision_top1").value <= report.metrics.at("r_precision_top3").value);
    CHECK(report.metrics.at("r_precision_top3").value > 3.0 / 8.0);
    const auto again = score_pool(pool, ConditionMode::Text, ds, ev, cfg);
    CHECK(again.to_json() == report.to_json());
  }

  SUBCASE("generation and sweep with an untrained model") {
    const auto dc = tiny_text_config(ds.layout.dim());
    const DenoiserX0Model model(make_denoiser(dc));
    const auto sched = make_cosine_schedule(dc.diffusion_steps);
    EvalConfig cfg;
    cfg.reps = 2;
    cfg.max_prompts = 8;
    cfg.mm_prompts = 2;
    cfg.mm_samples = 3;
    cfg.rprecision_pool = 4;
    cfg.frames = 20;
    const auto pool = generate_pool(model, ConditionMode::Text, ds, ds.stats, sched, cfg, 2.5);
    CHECK(pool.motions.size() == 8u + 2u * 2u);
    CHECK(pool.motions[0].frames() == 20);
    const auto sweep = guidance_sweep(model, ConditionMode::Text, ds, ds.stats, ev, sched, {0.0, 1.0, 2.5}, cfg);
    CHECK(sweep.reports.size() == 3);
    const auto csv = sweep.csv();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    CHECK(sweep.table().find("r_precision_top3") != std::string::npos);
    CHECK_THROWS_AS(guidance_sweep(model, ConditionMode::Text, ds, ds.stats, ev, sched, {}, cfg), ValidationError);

    cfg.unconditional_samples = 4;
    CHECK(generate_pool(model, ConditionMode::Unconditional, ds, ds.stats, sched, cfg, 1.0).motions.size() == 4);
  }
}
