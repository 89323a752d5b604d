#pragma once

#include <torch/torch.h>

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdm/denoiser.hpp"
#include "mdm/diffusion.hpp"
#include "mdm/motion.hpp"

namespace mdm {

// ---- metrics over feature sets (rows = samples) ----

// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)); (S1 S2)^(1/2) traced via the
// eigenvalues of S1^(1/2) S2 S1^(1/2), negatives clipped to 0. Sets with
// n <= dim get 1e-6 added to the covariance diagonal.
double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// Mean distance over n_pairs disjoint random pairs; needs 2 n_pairs rows.
double diversity(const Eigen::MatrixXd& features, int n_pairs, std::mt19937_64& rng);

// Mean over groups of the mean distance of `pairs_per_group` random pairs of
// distinct members.
double multimodality(const std::vector<Eigen::MatrixXd>& groups, int pairs_per_group, std::mt19937_64& rng);

// Rows are paired. Shuffled pools of `pool` pairs; for each motion, the rank
// of its own text among the pool's texts by Euclidean distance. Returns
// top-1..top-3 hit rates.
std::array<double, 3> r_precision(const Eigen::MatrixXd& motion, const Eigen::MatrixXd& text, int pool,
                                  std::mt19937_64& rng);

double multimodal_distance(const Eigen::MatrixXd& motion, const Eigen::MatrixXd& text);

double recognition_accuracy(const std::vector<int>& predicted, const std::vector<int>& intended, int num_classes);

// Mean horizontal (x, z) displacement of a foot between frame i and i+1 over
// every (i, foot) with contact at i; 0 when there is no contact.
double foot_skate(const JointPositions& positions, const Skeleton& skeleton, const ContactMask& contacts);

// Rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// 95th percentile of |x[i+1] - x[i]| per channel over the given clips.
Eigen::VectorXd frame_velocity_percentile(const std::vector<MotionSequence>& motions, const std::vector<int>& indices,
                                          double q = 0.95);

struct MetricValue {
  double value = 0.0;
  double half_width = 0.0;  // 1.96 sd / sqrt(reps)
  int reps = 1;
};
MetricValue summarize(const std::vector<double>& replications);

struct EvalReport {
  std::map<std::string, MetricValue> metrics;
  std::string config_hash;
  nlohmann::json counts = nlohmann::json::object();
  nlohmann::json info = nlohmann::json::object();

  nlohmann::json to_json() const;
  std::string table() const;  // aligned plain text
  void validate() const;      // every value finite, reps >= 1
};

// ---- learned feature extractors ----

class MotionEncoderImpl : public torch::nn::Module {
 public:
  MotionEncoderImpl(int feature_dim, int hidden, int out_dim);
  // x [B, N, F] normalized; lengths may be empty. -> [B, out_dim]
  torch::Tensor forward(const torch::Tensor& x, const std::vector<int>& lengths = {});

 private:
  torch::nn::Conv1d conv1_{nullptr}, conv2_{nullptr}, conv3_{nullptr};
  torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(MotionEncoder);

class TextEncoderImpl : public torch::nn::Module {
 public:
  TextEncoderImpl(int slots, int width, int out_dim);
  torch::Tensor forward(const std::vector<std::string>& prompts);

 private:
  int slots_;
  torch::nn::Embedding bag_{nullptr};
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(TextEncoder);

struct EvaluatorConfig {
  int hidden = 64;
  int feature_dim = 32;
  int classifier_steps = 1500;
  int embedder_steps = 2000;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double temperature = 0.1;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static EvaluatorConfig from_json(const nlohmann::json& j);
};

// Action classifier (its penultimate layer is the FID feature space) and a
// contrastively trained text/motion embedder, fit on the corpus train split.
class Evaluators {
 public:
  Evaluators(const EvaluatorConfig& config, int motion_dim, int num_classes, DatasetStats stats);

  static Evaluators train(const LabeledDataset& dataset, const EvaluatorConfig& config);
  void save(const std::filesystem::path& path) const;
  static Evaluators load(const std::filesystem::path& path);

  // Motions are un-normalized; stats come from the training corpus.
  Eigen::MatrixXd motion_features(const std::vector<MotionSequence>& motions) const;
  std::vector<int> classify(const std::vector<MotionSequence>& motions) const;
  Eigen::MatrixXd joint_motion_features(const std::vector<MotionSequence>& motions) const;
  Eigen::MatrixXd joint_text_features(const std::vector<std::string>& prompts) const;

  const EvaluatorConfig& config() const { return config_; }
  int num_classes() const { return num_classes_; }
  double train_accuracy() const { return train_accuracy_; }
  double test_accuracy() const { return test_accuracy_; }
  const std::string& corpus_hash() const { return corpus_hash_; }
  void set_corpus_hash(std::string h) { corpus_hash_ = std::move(h); }

 private:
  torch::Tensor batch(const std::vector<MotionSequence>& motions, std::vector<int>& lengths) const;

  EvaluatorConfig config_;
  int motion_dim_, num_classes_;
  DatasetStats stats_;
  // Inference flips train/eval flags, hence mutable.
  mutable MotionEncoder classifier_body_{nullptr};
  mutable torch::nn::Linear classifier_head_{nullptr};
  mutable MotionEncoder joint_motion_{nullptr};
  mutable TextEncoder joint_text_{nullptr};
  double train_accuracy_ = 0.0, test_accuracy_ = 0.0;
  std::string corpus_hash_;
};

// Train, or reuse a cached file whose corpus hash matches.
Evaluators load_or_train_evaluators(const std::filesystem::path& cache, const LabeledDataset& dataset,
                                    const std::string& corpus_hash, const EvaluatorConfig& config);

// ---- generation + scoring ----

struct EvalConfig {
  int reps = 20;
  double guidance_scale = 2.5;
  std::uint64_t seed = 0;
  int diversity_pairs = 300;  // clipped to half the pool
  int mm_prompts = 16;        // conditions that get extra samples for multimodality
  int mm_samples = 3;
  int mm_pairs = 10;
  int rprecision_pool = 32;
  int samples_per_class = 32;  // action models
  int unconditional_samples = 128;
  int max_prompts = 0;  // text models: 0 = every test clip
  int frames = 0;       // 0 = rounded mean test-clip length
  double subsample = 0.8;
  int batch = 128;

  void validate() const;
  nlohmann::json to_json() const;
  static EvalConfig from_json(const nlohmann::json& j);
};

struct GeneratedPool {
  std::vector<MotionSequence> motions;
  std::vector<Condition> conditions;
  std::vector<int> group;       // condition id shared by repeated samples
  std::vector<int> intended;    // action class, or the source clip's class
  std::vector<bool> primary;    // one sample per condition
  double seconds = 0.0;
};

GeneratedPool generate_pool(const X0Model& model, ConditionMode mode, const LabeledDataset& dataset,
                            const DatasetStats& stats, const NoiseSchedule& schedule, const EvalConfig& config,
                            double guidance_scale);

// Metrics: fid, diversity, multimodality, and per mode recognition_accuracy
// (action) or r_precision_top{1,2,3} + multimodal_dist (text).
EvalReport score_pool(const GeneratedPool& pool, ConditionMode mode, const LabeledDataset& dataset,
                      const Evaluators& evaluators, const EvalConfig& config);

EvalReport evaluate(const X0Model& model, ConditionMode mode, const LabeledDataset& dataset, const DatasetStats& stats,
                    const Evaluators& evaluators, const NoiseSchedule& schedule, const EvalConfig& config);

struct SweepResult {
  std::vector<double> scales;
  std::vector<EvalReport> reports;
  std::string relevance_metric;
  double relevance_spearman = 0.0;  // relevance vs s over s <= 2.5
  double diversity_spearman = 0.0;  // diversity vs s over every s
  std::string csv() const;          // s,metric,value,half_width,reps
  std::string table() const;
  nlohmann::json to_json() const;
};

SweepResult guidance_sweep(const X0Model& model, ConditionMode mode, const LabeledDataset& dataset,
                           const DatasetStats& stats, const Evaluators& evaluators, const NoiseSchedule& schedule,
                           const std::vector<double>& scales, const EvalConfig& config,
                           const std::function<void(double, const EvalReport&)>& on_row = {});

}  // namespace mdm
