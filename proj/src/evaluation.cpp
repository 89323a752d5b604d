#include "mdm/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "mdm/checkpoint.hpp"
#include "mdm/error.hpp"
#include "mdm/hash.hpp"

namespace mdm {

namespace {

void require_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite features");
}

// Mean and covariance (n - 1 normalization); 1e-6 ridge when n <= dim.
std::pair<Eigen::VectorXd, Eigen::MatrixXd> gaussian_fit(const Eigen::MatrixXd& x) {
  const Eigen::VectorXd mu = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
  const double denom = std::max<double>(1.0, static_cast<double>(x.rows()) - 1.0);
  Eigen::MatrixXd cov = (centered.transpose() * centered) / denom;
  if (x.rows() <= x.cols()) cov.diagonal().array() += 1e-6;
  return {mu, cov};
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

double row_distance(const Eigen::MatrixXd& a, Eigen::Index i, const Eigen::MatrixXd& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).norm();
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
  const auto c = t.to(torch::kDouble).contiguous();
  Eigen::MatrixXd m(c.size(0), c.size(1));
  const double* p = c.data_ptr<double>();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = p[i * m.cols() + j];
  return m;
}

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& m, const std::vector<int>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

// [B, N] float mask of frames < length.
torch::Tensor frame_mask(const std::vector<int>& lengths, std::int64_t frames) {
  auto mask = torch::zeros({static_cast<std::int64_t>(lengths.size()), frames});
  for (std::size_t b = 0; b < lengths.size(); ++b) mask[static_cast<std::int64_t>(b)].narrow(0, 0, lengths[b]).fill_(1.0);
  return mask;
}

}  // namespace

// ---- metrics ----

double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() == 0 || b.rows() == 0) throw ValidationError("fid: empty feature set");
  if (a.cols() != b.cols()) throw ShapeError("fid: feature widths differ");
  require_finite(a, "fid");
  require_finite(b, "fid");
  const auto [mu1, s1] = gaussian_fit(a);
  const auto [mu2, s2] = gaussian_fit(b);
  const Eigen::MatrixXd r = psd_sqrt(s1);
  const Eigen::MatrixXd prod = r * s2 * r;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (prod + prod.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

double diversity(const Eigen::MatrixXd& features, int n_pairs, std::mt19937_64& rng) {
  if (n_pairs < 1) throw ValidationError("diversity: n_pairs must be >= 1");
  if (features.rows() < 2 * static_cast<Eigen::Index>(n_pairs))
    throw ValidationError("diversity: need " + std::to_string(2 * n_pairs) + " samples, have " +
                          std::to_string(features.rows()));
  require_finite(features, "diversity");
  std::vector<int> perm(static_cast<std::size_t>(features.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  double total = 0.0;
  for (int i = 0; i < n_pairs; ++i) total += row_distance(features, perm[2 * i], features, perm[2 * i + 1]);
  return total / n_pairs;
}

double multimodality(const std::vector<Eigen::MatrixXd>& groups, int pairs_per_group, std::mt19937_64& rng) {
  if (groups.empty()) throw ValidationError("multimodality: no groups");
  if (pairs_per_group < 1) throw ValidationError("multimodality: pairs_per_group must be >= 1");
  double total = 0.0;
  for (const auto& g : groups) {
    if (g.rows() < 2) throw ValidationError("multimodality: every group needs >= 2 samples");
    require_finite(g, "multimodality");
    std::uniform_int_distribution<Eigen::Index> first(0, g.rows() - 1), other(0, g.rows() - 2);
    double sum = 0.0;
    for (int p = 0; p < pairs_per_group; ++p) {
      const Eigen::Index i = first(rng);
      Eigen::Index j = other(rng);
      if (j >= i) ++j;
      sum += row_distance(g, i, g, j);
    }
    total += sum / pairs_per_group;
  }
  return total / static_cast<double>(groups.size());
}

std::array<double, 3> r_precision(const Eigen::MatrixXd& motion, const Eigen::MatrixXd& text, int pool,
                                  std::mt19937_64& rng) {
  if (motion.rows() != text.rows() || motion.cols() != text.cols())
    throw ShapeError("r_precision: motion and text features must be paired and equally wide");
  if (pool < 3) throw ValidationError("r_precision: pool must be >= 3");
  if (motion.rows() < pool)
    throw ValidationError("r_precision: need " + std::to_string(pool) + " pairs, have " + std::to_string(motion.rows()));
  require_finite(motion, "r_precision");
  require_finite(text, "r_precision");
  std::vector<int> perm(static_cast<std::size_t>(motion.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t pools = perm.size() / static_cast<std::size_t>(pool);
  std::array<double, 3> hits{0.0, 0.0, 0.0};
  for (std::size_t p = 0; p < pools; ++p) {
    const int* idx = perm.data() + p * pool;
    for (int i = 0; i < pool; ++i) {
      const double own = row_distance(motion, idx[i], text, idx[i]);
      int closer = 0;
      for (int j = 0; j < pool; ++j)
        if (j != i && row_distance(motion, idx[i], text, idx[j]) < own) ++closer;
      for (int k = 0; k < 3; ++k)
        if (closer <= k) hits[k] += 1.0;
    }
  }
  const double n = static_cast<double>(pools * pool);
  return {hits[0] / n, hits[1] / n, hits[2] / n};
}

double multimodal_distance(const Eigen::MatrixXd& motion, const Eigen::MatrixXd& text) {
  if (motion.rows() != text.rows() || motion.cols() != text.cols())
    throw ShapeError("multimodal_distance: motion and text features must be paired and equally wide");
  if (motion.rows() == 0) throw ValidationError("multimodal_distance: empty feature set");
  require_finite(motion, "multimodal_distance");
  require_finite(text, "multimodal_distance");
  return (motion - text).rowwise().norm().mean();
}

double recognition_accuracy(const std::vector<int>& predicted, const std::vector<int>& intended, int num_classes) {
  if (predicted.size() != intended.size()) throw ShapeError("recognition_accuracy: length mismatch");
  if (predicted.empty()) throw ValidationError("recognition_accuracy: no samples");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < intended.size(); ++i) {
    if (intended[i] < 0 || intended[i] >= num_classes)
      throw ValidationError("recognition_accuracy: label " + std::to_string(intended[i]) + " outside classifier classes");
    if (predicted[i] == intended[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(intended.size());
}

double foot_skate(const JointPositions& positions, const Skeleton& skeleton, const ContactMask& contacts) {
  if (positions.frames < 2) throw ValidationError("foot_skate: need >= 2 frames");
  if (positions.joints != skeleton.num_joints()) throw ShapeError("foot_skate: joint count differs from skeleton");
  if (contacts.frames != positions.frames || contacts.feet != skeleton.num_feet())
    throw ShapeError("foot_skate: contact mask shape differs");
  double total = 0.0;
  int count = 0;
  const auto& feet = skeleton.foot_joints();
  for (int i = 0; i + 1 < positions.frames; ++i) {
    for (int k = 0; k < contacts.feet; ++k) {
      if (!contacts.at(i, k)) continue;
      const Vec3 d = positions.at(i + 1, feet[k]) - positions.at(i, feet[k]);
      total += std::hypot(d.x(), d.z());
      ++count;
    }
  }
  if (!std::isfinite(total)) throw NumericError("foot_skate: non-finite positions");
  return count == 0 ? 0.0 : total / count;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ShapeError("spearman: length mismatch");
  if (x.size() < 2) throw ValidationError("spearman: need >= 2 points");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;  // a constant series carries no order
  return sxy / std::sqrt(sxx * syy);
}

Eigen::VectorXd frame_velocity_percentile(const std::vector<MotionSequence>& motions, const std::vector<int>& indices,
                                          double q) {
  if (indices.empty()) throw ValidationError("frame_velocity_percentile: no clips");
  if (!(q >= 0.0 && q <= 1.0)) throw ValidationError("frame_velocity_percentile: q must lie in [0, 1]");
  const int dim = motions.at(indices.front()).dim();
  std::vector<std::vector<double>> per_channel(dim);
  for (int idx : indices) {
    const auto& m = motions.at(idx).features;
    if (m.cols() != dim) throw ShapeError("frame_velocity_percentile: feature widths differ");
    for (Eigen::Index i = 0; i + 1 < m.rows(); ++i)
      for (int c = 0; c < dim; ++c) per_channel[c].push_back(std::abs(double(m(i + 1, c)) - double(m(i, c))));
  }
  Eigen::VectorXd out(dim);
  for (int c = 0; c < dim; ++c) {
    auto& v = per_channel[c];
    if (v.empty()) throw ValidationError("frame_velocity_percentile: clips need >= 2 frames");
    const auto k = static_cast<std::size_t>(std::llround(q * static_cast<double>(v.size() - 1)));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    out[c] = v[k];
  }
  return out;
}

MetricValue summarize(const std::vector<double>& reps) {
  if (reps.empty()) throw ValidationError("summarize: no replications");
  const double n = static_cast<double>(reps.size());
  const double mean = std::accumulate(reps.begin(), reps.end(), 0.0) / n;
  double var = 0.0;
  for (double r : reps) var += (r - mean) * (r - mean);
  const double sd = reps.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  return {mean, 1.96 * sd / std::sqrt(n), static_cast<int>(reps.size())};
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json m = nlohmann::json::object();
  for (const auto& [name, v] : metrics) m[name] = {{"value", v.value}, {"half_width", v.half_width}, {"reps", v.reps}};
  return {{"metrics", m}, {"config_hash", config_hash}, {"counts", counts}, {"info", info}};
}

std::string EvalReport::table() const {
  std::size_t width = 6;
  for (const auto& [name, v] : metrics) width = std::max(width, name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width)) << "metric" << "  " << std::right << std::setw(12) << "value"
     << "  " << std::setw(12) << "+/-" << "  " << std::setw(5) << "reps" << "\n";
  os << std::fixed << std::setprecision(5);
  for (const auto& [name, v] : metrics)
    os << std::left << std::setw(static_cast<int>(width)) << name << "  " << std::right << std::setw(12) << v.value
       << "  " << std::setw(12) << v.half_width << "  " << std::setw(5) << v.reps << "\n";
  return os.str();
}

void EvalReport::validate() const {
  for (const auto& [name, v] : metrics) {
    if (!std::isfinite(v.value) || !std::isfinite(v.half_width)) throw NumericError("eval report: " + name + " is not finite");
    if (v.reps < 1) throw ValidationError("eval report: " + name + " has no replications");
  }
}

// ---- feature extractors ----

MotionEncoderImpl::MotionEncoderImpl(int feature_dim, int hidden, int out_dim) {
  conv1_ = register_module("conv1", torch::nn::Conv1d(torch::nn::Conv1dOptions(feature_dim, hidden, 5).padding(2)));
  conv2_ = register_module("conv2", torch::nn::Conv1d(torch::nn::Conv1dOptions(hidden, hidden, 5).padding(2)));
  conv3_ = register_module("conv3", torch::nn::Conv1d(torch::nn::Conv1dOptions(hidden, hidden, 3).padding(1)));
  proj_ = register_module("proj", torch::nn::Linear(hidden, out_dim));
}

torch::Tensor MotionEncoderImpl::forward(const torch::Tensor& x, const std::vector<int>& lengths) {
  const auto frames = x.size(1);
  torch::Tensor mask = lengths.empty() ? torch::ones({x.size(0), frames}, x.options())
                                       : frame_mask(lengths, frames).to(x.dtype());
  const auto m = mask.unsqueeze(1);  // [B, 1, N]
  // Padded frames are zeroed after every layer, so each clip sees the same
  // zero border it would see when run alone.
  auto h = x.transpose(1, 2) * m;
  h = torch::gelu(conv1_->forward(h)) * m;
  h = torch::gelu(conv2_->forward(h)) * m;
  h = torch::gelu(conv3_->forward(h)) * m;
  const auto pooled = h.sum(2) / m.sum(2).clamp_min(1.0);
  return proj_->forward(pooled);
}

TextEncoderImpl::TextEncoderImpl(int slots, int width, int out_dim) : slots_(slots) {
  bag_ = register_module("bag", torch::nn::Embedding(slots, width));
  fc1_ = register_module("fc1", torch::nn::Linear(width, width));
  fc2_ = register_module("fc2", torch::nn::Linear(width, out_dim));
}

torch::Tensor TextEncoderImpl::forward(const std::vector<std::string>& prompts) {
  std::vector<torch::Tensor> rows;
  rows.reserve(prompts.size());
  const auto width = bag_->weight.size(1);
  for (const auto& p : prompts) {
    const auto ids = hashed_tokens(p, slots_);
    if (ids.empty()) {
      rows.push_back(torch::zeros({width}, bag_->weight.options()));
      continue;
    }
    auto idx = torch::tensor(ids, torch::kLong);
    rows.push_back(bag_->forward(idx).mean(0));
  }
  return fc2_->forward(torch::gelu(fc1_->forward(torch::stack(rows))));
}

nlohmann::json EvaluatorConfig::to_json() const {
  return {{"hidden", hidden},
          {"feature_dim", feature_dim},
          {"classifier_steps", classifier_steps},
          {"embedder_steps", embedder_steps},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"temperature", temperature},
          {"seed", seed}};
}

EvaluatorConfig EvaluatorConfig::from_json(const nlohmann::json& j) {
  EvaluatorConfig c;
  c.hidden = j.value("hidden", c.hidden);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.classifier_steps = j.value("classifier_steps", c.classifier_steps);
  c.embedder_steps = j.value("embedder_steps", c.embedder_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.temperature = j.value("temperature", c.temperature);
  c.seed = j.value("seed", c.seed);
  return c;
}

constexpr int kTextSlots = 512;
constexpr int kTextWidth = 64;
constexpr char kEvaluatorMagic[] = "MDMEVAL1";

Evaluators::Evaluators(const EvaluatorConfig& config, int motion_dim, int num_classes, DatasetStats stats)
    : config_(config), motion_dim_(motion_dim), num_classes_(num_classes), stats_(std::move(stats)) {
  if (config.hidden < 1 || config.feature_dim < 1) throw ValidationError("evaluators: widths must be positive");
  if (num_classes < 2) throw ValidationError("evaluators: need >= 2 classes");
  if (stats_.dim() != motion_dim) throw ShapeError("evaluators: stats width differs from motion width");
  torch::manual_seed(config.seed);
  classifier_body_ = MotionEncoder(motion_dim, config.hidden, config.feature_dim);
  classifier_head_ = torch::nn::Linear(config.feature_dim, num_classes);
  joint_motion_ = MotionEncoder(motion_dim, config.hidden, config.feature_dim);
  joint_text_ = TextEncoder(kTextSlots, kTextWidth, config.feature_dim);
}

torch::Tensor Evaluators::batch(const std::vector<MotionSequence>& motions, std::vector<int>& lengths) const {
  if (motions.empty()) throw ValidationError("evaluators: no motions");
  int frames = 0;
  for (const auto& m : motions) {
    if (m.dim() != motion_dim_) throw ShapeError("evaluators: motion width " + std::to_string(m.dim()) +
                                                 " differs from " + std::to_string(motion_dim_));
    if (m.frames() < 1) throw ValidationError("evaluators: empty motion");
    if (!m.features.allFinite()) throw NumericError("evaluators: non-finite motion");
    frames = std::max(frames, m.frames());
  }
  auto x = torch::zeros({static_cast<std::int64_t>(motions.size()), frames, motion_dim_});
  lengths.clear();
  for (std::size_t b = 0; b < motions.size(); ++b) {
    const auto n = normalize(motions[b], stats_);
    x[static_cast<std::int64_t>(b)].narrow(0, 0, n.frames()).copy_(to_tensor(n.features));
    lengths.push_back(n.frames());
  }
  return x;
}

namespace {

template <typename Fn>
Eigen::MatrixXd chunked(std::size_t n, std::size_t chunk, Fn&& fn) {
  std::vector<Eigen::MatrixXd> parts;
  Eigen::Index rows = 0, cols = 0;
  for (std::size_t s = 0; s < n; s += chunk) {
    parts.push_back(fn(s, std::min(n, s + chunk)));
    rows += parts.back().rows();
    cols = parts.back().cols();
  }
  Eigen::MatrixXd out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return out;
}

constexpr std::size_t kFeatureChunk = 256;

}  // namespace

Eigen::MatrixXd Evaluators::motion_features(const std::vector<MotionSequence>& motions) const {
  torch::NoGradGuard ng;
  classifier_body_->eval();
  return chunked(motions.size(), kFeatureChunk, [&](std::size_t a, std::size_t b) {
    std::vector<MotionSequence> part(motions.begin() + a, motions.begin() + b);
    std::vector<int> lengths;
    const auto x = batch(part, lengths);
    return to_eigen(classifier_body_->forward(x, lengths));
  });
}

std::vector<int> Evaluators::classify(const std::vector<MotionSequence>& motions) const {
  torch::NoGradGuard ng;
  classifier_body_->eval();
  classifier_head_->eval();
  std::vector<int> out;
  out.reserve(motions.size());
  for (std::size_t a = 0; a < motions.size(); a += kFeatureChunk) {
    std::vector<MotionSequence> part(motions.begin() + a, motions.begin() + std::min(motions.size(), a + kFeatureChunk));
    std::vector<int> lengths;
    const auto x = batch(part, lengths);
    const auto logits = classifier_head_->forward(torch::gelu(classifier_body_->forward(x, lengths)));
    const auto arg = logits.argmax(1);
    for (std::int64_t i = 0; i < arg.size(0); ++i) out.push_back(static_cast<int>(arg[i].item<std::int64_t>()));
  }
  return out;
}

Eigen::MatrixXd Evaluators::joint_motion_features(const std::vector<MotionSequence>& motions) const {
  torch::NoGradGuard ng;
  joint_motion_->eval();
  return chunked(motions.size(), kFeatureChunk, [&](std::size_t a, std::size_t b) {
    std::vector<MotionSequence> part(motions.begin() + a, motions.begin() + b);
    std::vector<int> lengths;
    const auto x = batch(part, lengths);
    return to_eigen(torch::nn::functional::normalize(joint_motion_->forward(x, lengths),
                                                     torch::nn::functional::NormalizeFuncOptions().dim(1)));
  });
}

Eigen::MatrixXd Evaluators::joint_text_features(const std::vector<std::string>& prompts) const {
  if (prompts.empty()) throw ValidationError("evaluators: no prompts");
  torch::NoGradGuard ng;
  joint_text_->eval();
  return chunked(prompts.size(), kFeatureChunk, [&](std::size_t a, std::size_t b) {
    std::vector<std::string> part(prompts.begin() + a, prompts.begin() + b);
    return to_eigen(torch::nn::functional::normalize(joint_text_->forward(part),
                                                     torch::nn::functional::NormalizeFuncOptions().dim(1)));
  });
}

Evaluators Evaluators::train(const LabeledDataset& dataset, const EvaluatorConfig& config) {
  dataset.validate();
  if (dataset.train.empty() || dataset.test.empty()) throw ValidationError("evaluators: dataset needs train and test clips");
  if (config.batch_size < 2) throw ValidationError("evaluators: batch_size must be >= 2");
  if (!(config.learning_rate > 0.0)) throw ValidationError("evaluators: learning_rate must be positive");
  if (!(config.temperature > 0.0)) throw ValidationError("evaluators: temperature must be positive");

  Evaluators ev(config, dataset.layout.dim(), dataset.num_classes(), dataset.stats);
  std::mt19937_64 rng(split_seed(config.seed, 0xe7a1));
  std::uniform_int_distribution<std::size_t> pick(0, dataset.train.size() - 1);
  const auto draw = [&](std::vector<MotionSequence>& motions, std::vector<int>& ids) {
    motions.clear();
    ids.clear();
    for (int b = 0; b < config.batch_size; ++b) {
      const int idx = dataset.train[pick(rng)];
      motions.push_back(dataset.motions[idx]);
      ids.push_back(idx);
    }
  };

  {
    std::vector<torch::Tensor> params = ev.classifier_body_->parameters();
    for (auto& p : ev.classifier_head_->parameters()) params.push_back(p);
    torch::optim::Adam opt(params, torch::optim::AdamOptions(config.learning_rate));
    ev.classifier_body_->train();
    ev.classifier_head_->train();
    std::vector<MotionSequence> motions;
    std::vector<int> ids, lengths;
    for (int step = 0; step < config.classifier_steps; ++step) {
      draw(motions, ids);
      auto x = ev.batch(motions, lengths);
      // Mild input noise keeps the classifier usable on imperfect samples.
      x = x + 0.05 * torch::randn_like(x);
      std::vector<std::int64_t> labels;
      for (int idx : ids) labels.push_back(dataset.labels[idx].action);
      const auto logits = ev.classifier_head_->forward(torch::gelu(ev.classifier_body_->forward(x, lengths)));
      const auto loss = torch::nn::functional::cross_entropy(logits, torch::tensor(labels, torch::kLong));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  {
    std::vector<torch::Tensor> params = ev.joint_motion_->parameters();
    for (auto& p : ev.joint_text_->parameters()) params.push_back(p);
    torch::optim::Adam opt(params, torch::optim::AdamOptions(config.learning_rate));
    ev.joint_motion_->train();
    ev.joint_text_->train();
    std::vector<MotionSequence> motions;
    std::vector<int> ids, lengths;
    for (int step = 0; step < config.embedder_steps; ++step) {
      draw(motions, ids);
      std::vector<std::string> captions;
      for (int idx : ids) {
        const auto& caps = dataset.labels[idx].captions;
        if (caps.empty()) throw ValidationError("evaluators: clip " + std::to_string(idx) + " has no caption");
        captions.push_back(caps[std::uniform_int_distribution<std::size_t>(0, caps.size() - 1)(rng)]);
      }
      const auto x = ev.batch(motions, lengths);
      namespace F = torch::nn::functional;
      const auto m = F::normalize(ev.joint_motion_->forward(x, lengths), F::NormalizeFuncOptions().dim(1));
      const auto t = F::normalize(ev.joint_text_->forward(captions), F::NormalizeFuncOptions().dim(1));
      const auto logits = m.matmul(t.t()) / config.temperature;
      const auto target = torch::arange(logits.size(0), torch::kLong);
      const auto loss = 0.5 * (F::cross_entropy(logits, target) + F::cross_entropy(logits.t(), target));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }

  const auto accuracy = [&](const std::vector<int>& split) {
    std::vector<MotionSequence> motions;
    std::vector<int> labels;
    for (int idx : split) {
      motions.push_back(dataset.motions[idx]);
      labels.push_back(dataset.labels[idx].action);
    }
    return recognition_accuracy(ev.classify(motions), labels, ev.num_classes_);
  };
  ev.train_accuracy_ = accuracy(dataset.train);
  ev.test_accuracy_ = accuracy(dataset.test);
  return ev;
}

void Evaluators::save(const std::filesystem::path& path) const {
  TensorArchive ar;
  ar.header = {{"config", config_.to_json()},
               {"motion_dim", motion_dim_},
               {"num_classes", num_classes_},
               {"stats", stats_.to_json()},
               {"train_accuracy", train_accuracy_},
               {"test_accuracy", test_accuracy_},
               {"corpus_hash", corpus_hash_}};
  const auto add = [&](const std::string& prefix, const torch::nn::Module& m) {
    for (auto& [name, t] : named_parameters(m)) ar.tensors.emplace_back(prefix + name, t.detach().to(torch::kFloat));
  };
  add("classifier_body/", *classifier_body_);
  add("classifier_head/", *classifier_head_);
  add("joint_motion/", *joint_motion_);
  add("joint_text/", *joint_text_);
  write_archive(path, kEvaluatorMagic, ar);
}

Evaluators Evaluators::load(const std::filesystem::path& path) {
  const auto ar = read_archive(path, kEvaluatorMagic);
  try {
    Evaluators ev(EvaluatorConfig::from_json(ar.header.at("config")), ar.header.at("motion_dim").get<int>(),
                  ar.header.at("num_classes").get<int>(), DatasetStats::from_json(ar.header.at("stats")));
    ev.train_accuracy_ = ar.header.value("train_accuracy", 0.0);
    ev.test_accuracy_ = ar.header.value("test_accuracy", 0.0);
    ev.corpus_hash_ = ar.header.value("corpus_hash", std::string());
    torch::NoGradGuard ng;
    const auto fill = [&](const std::string& prefix, const torch::nn::Module& m) {
      for (auto& [name, t] : named_parameters(m)) {
        const auto& src = ar.get(prefix + name);
        if (src.sizes() != t.sizes()) throw FormatError("evaluators: shape mismatch for " + prefix + name);
        t.copy_(src);
      }
    };
    fill("classifier_body/", *ev.classifier_body_);
    fill("classifier_head/", *ev.classifier_head_);
    fill("joint_motion/", *ev.joint_motion_);
    fill("joint_text/", *ev.joint_text_);
    return ev;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("evaluators: bad header: ") + e.what());
  }
}

Evaluators load_or_train_evaluators(const std::filesystem::path& cache, const LabeledDataset& dataset,
                                    const std::string& corpus_hash, const EvaluatorConfig& config) {
  if (!cache.empty() && std::filesystem::exists(cache)) {
    auto ev = Evaluators::load(cache);
    if (ev.corpus_hash() == corpus_hash && ev.config().to_json() == config.to_json()) return ev;
  }
  auto ev = Evaluators::train(dataset, config);
  ev.set_corpus_hash(corpus_hash);
  if (!cache.empty()) {
    if (cache.has_parent_path()) std::filesystem::create_directories(cache.parent_path());
    ev.save(cache);
  }
  return ev;
}

// ---- generation + scoring ----

void EvalConfig::validate() const {
  if (reps < 1) throw ValidationError("eval: reps must be >= 1");
  if (!std::isfinite(guidance_scale)) throw ValidationError("eval: guidance_scale must be finite");
  if (diversity_pairs < 1) throw ValidationError("eval: diversity_pairs must be >= 1");
  if (mm_prompts < 0 || mm_samples < 1 || mm_pairs < 1) throw ValidationError("eval: bad multimodality settings");
  if (rprecision_pool < 3) throw ValidationError("eval: rprecision_pool must be >= 3");
  if (samples_per_class < 1 || unconditional_samples < 2) throw ValidationError("eval: sample counts too small");
  if (max_prompts < 0 || frames < 0) throw ValidationError("eval: max_prompts and frames must be >= 0");
  if (!(subsample > 0.0 && subsample <= 1.0)) throw ValidationError("eval: subsample must lie in (0, 1]");
  if (batch < 1) throw ValidationError("eval: batch must be >= 1");
}

nlohmann::json EvalConfig::to_json() const {
  return {{"reps", reps},
          {"guidance_scale", guidance_scale},
          {"seed", seed},
          {"diversity_pairs", diversity_pairs},
          {"mm_prompts", mm_prompts},
          {"mm_samples", mm_samples},
          {"mm_pairs", mm_pairs},
          {"rprecision_pool", rprecision_pool},
          {"samples_per_class", samples_per_class},
          {"unconditional_samples", unconditional_samples},
          {"max_prompts", max_prompts},
          {"frames", frames},
          {"subsample", subsample},
          {"batch", batch}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
  EvalConfig c;
  c.reps = j.value("reps", c.reps);
  c.guidance_scale = j.value("guidance_scale", c.guidance_scale);
  c.seed = j.value("seed", c.seed);
  c.diversity_pairs = j.value("diversity_pairs", c.diversity_pairs);
  c.mm_prompts = j.value("mm_prompts", c.mm_prompts);
  c.mm_samples = j.value("mm_samples", c.mm_samples);
  c.mm_pairs = j.value("mm_pairs", c.mm_pairs);
  c.rprecision_pool = j.value("rprecision_pool", c.rprecision_pool);
  c.samples_per_class = j.value("samples_per_class", c.samples_per_class);
  c.unconditional_samples = j.value("unconditional_samples", c.unconditional_samples);
  c.max_prompts = j.value("max_prompts", c.max_prompts);
  c.frames = j.value("frames", c.frames);
  c.subsample = j.value("subsample", c.subsample);
  c.batch = j.value("batch", c.batch);
  c.validate();
  return c;
}

namespace {

int eval_frames(const EvalConfig& config, const LabeledDataset& dataset, const X0Model& model) {
  int frames = config.frames;
  if (frames == 0) {
    double sum = 0.0;
    for (int idx : dataset.test) sum += dataset.motions[idx].frames();
    frames = static_cast<int>(std::lround(sum / static_cast<double>(dataset.test.size())));
  }
  return std::clamp(frames, 2, model.max_frames());
}

// Evenly spaced picks so that every family is represented.
std::vector<int> spread(const std::vector<int>& items, int count) {
  if (count <= 0 || count >= static_cast<int>(items.size())) return items;
  std::vector<int> out;
  for (int i = 0; i < count; ++i)
    out.push_back(items[static_cast<std::size_t>(i) * items.size() / static_cast<std::size_t>(count)]);
  return out;
}

}  // namespace

GeneratedPool generate_pool(const X0Model& model, ConditionMode mode, const LabeledDataset& dataset,
                            const DatasetStats& stats, const NoiseSchedule& schedule, const EvalConfig& config,
                            double guidance_scale) {
  config.validate();
  dataset.validate();
  if (dataset.test.empty()) throw ValidationError("eval: dataset has no test clips");
  const auto t0 = std::chrono::steady_clock::now();
  GeneratedPool pool;
  const auto add = [&](Condition c, int group, int intended, bool primary) {
    pool.conditions.push_back(std::move(c));
    pool.group.push_back(group);
    pool.intended.push_back(intended);
    pool.primary.push_back(primary);
  };

  switch (mode) {
    case ConditionMode::Action:
      for (int s = 0; s < config.samples_per_class; ++s)
        for (int k = 0; k < dataset.num_classes(); ++k) add(Condition::action(k), k, k, true);
      break;
    case ConditionMode::Text: {
      const auto prompts = spread(dataset.test, config.max_prompts);
      for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto& label = dataset.labels[prompts[i]];
        if (label.captions.empty()) throw ValidationError("eval: test clip without caption");
        add(Condition::text(label.captions.front()), static_cast<int>(i), label.action, true);
      }
      std::vector<int> ids(prompts.size());
      std::iota(ids.begin(), ids.end(), 0);
      for (int i : spread(ids, std::min<int>(config.mm_prompts, static_cast<int>(ids.size()))))
        for (int r = 1; r < config.mm_samples; ++r)
          add(pool.conditions[i], i, pool.intended[i], false);
      break;
    }
    case ConditionMode::Unconditional:
      for (int s = 0; s < config.unconditional_samples; ++s) add(Condition::null(), 0, -1, true);
      break;
  }

  const int frames = eval_frames(config, dataset, model);
  const auto chunk = static_cast<std::size_t>(config.batch);
  for (std::size_t a = 0, c = 0; a < pool.conditions.size(); a += chunk, ++c) {
    std::vector<Condition> part(pool.conditions.begin() + a,
                                pool.conditions.begin() + std::min(pool.conditions.size(), a + chunk));
    auto out = sample(model, part, frames, guidance_scale, schedule, stats, split_seed(config.seed, c));
    for (auto& m : out) pool.motions.push_back(std::move(m));
  }
  pool.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return pool;
}

EvalReport score_pool(const GeneratedPool& pool, ConditionMode mode, const LabeledDataset& dataset,
                      const Evaluators& evaluators, const EvalConfig& config) {
  config.validate();
  const std::size_t n = pool.motions.size();
  if (n < 2 || pool.conditions.size() != n || pool.group.size() != n || pool.primary.size() != n)
    throw ValidationError("eval: malformed generated pool");

  std::vector<MotionSequence> real;
  for (int idx : dataset.test) real.push_back(dataset.motions[idx]);
  const Eigen::MatrixXd real_feats = evaluators.motion_features(real);
  const Eigen::MatrixXd gen_feats = evaluators.motion_features(pool.motions);

  std::vector<int> primary;
  for (std::size_t i = 0; i < n; ++i)
    if (pool.primary[i]) primary.push_back(static_cast<int>(i));

  std::map<int, std::vector<int>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[pool.group[i]].push_back(static_cast<int>(i));
  std::vector<Eigen::MatrixXd> group_feats;
  for (const auto& [g, members] : groups)
    if (members.size() >= 2) group_feats.push_back(select_rows(gen_feats, members));

  std::vector<int> predicted;
  if (mode != ConditionMode::Unconditional) predicted = evaluators.classify(pool.motions);

  Eigen::MatrixXd joint_motion, joint_text;
  if (mode == ConditionMode::Text) {
    std::vector<MotionSequence> motions;
    std::vector<std::string> prompts;
    for (int i : primary) {
      motions.push_back(pool.motions[i]);
      prompts.push_back(pool.conditions[i].prompt());
    }
    joint_motion = evaluators.joint_motion_features(motions);
    joint_text = evaluators.joint_text_features(prompts);
  }

  const int div_pairs = std::min<int>(config.diversity_pairs, static_cast<int>(n / 2));
  const bool subsample = config.reps > 1 && config.subsample < 1.0;
  const int sub_n = subsample ? std::max(2, static_cast<int>(std::lround(config.subsample * primary.size())))
                              : static_cast<int>(primary.size());

  std::map<std::string, std::vector<double>> reps;
  for (int r = 0; r < config.reps; ++r) {
    std::mt19937_64 rng(split_seed(split_seed(config.seed, 0xe7a10001), static_cast<std::uint64_t>(r)));
    std::vector<int> sub(primary);  // positions into `primary`
    std::iota(sub.begin(), sub.end(), 0);
    if (subsample) {
      std::shuffle(sub.begin(), sub.end(), rng);
      sub.resize(static_cast<std::size_t>(sub_n));
      std::sort(sub.begin(), sub.end());
    }
    std::vector<int> sub_rows;
    for (int p : sub) sub_rows.push_back(primary[p]);

    reps["fid"].push_back(fid(select_rows(gen_feats, sub_rows), real_feats));
    reps["diversity"].push_back(diversity(gen_feats, div_pairs, rng));
    if (!group_feats.empty()) reps["multimodality"].push_back(multimodality(group_feats, config.mm_pairs, rng));
    if (mode == ConditionMode::Action) {
      std::vector<int> pred, want;
      for (int i : sub_rows) {
        pred.push_back(predicted[i]);
        want.push_back(pool.intended[i]);
      }
      reps["recognition_accuracy"].push_back(recognition_accuracy(pred, want, evaluators.num_classes()));
    }
    if (mode == ConditionMode::Text) {
      if (static_cast<int>(primary.size()) >= config.rprecision_pool) {
        const auto rp = r_precision(joint_motion, joint_text, config.rprecision_pool, rng);
        reps["r_precision_top1"].push_back(rp[0]);
        reps["r_precision_top2"].push_back(rp[1]);
        reps["r_precision_top3"].push_back(rp[2]);
      }
      reps["multimodal_dist"].push_back(
          multimodal_distance(select_rows(joint_motion, sub), select_rows(joint_text, sub)));
    }
  }

  EvalReport report;
  for (const auto& [name, values] : reps) report.metrics[name] = summarize(values);

  std::vector<double> skate;
  for (const auto& m : pool.motions) {
    const auto decoded = kinematics_from_features(dataset.skeleton, m);
    skate.push_back(foot_skate(fk_positions_from_features(dataset.skeleton, m), dataset.skeleton, decoded.contacts));
  }
  std::vector<double> sorted = skate;
  std::sort(sorted.begin(), sorted.end());
  report.metrics["foot_skate"] = {std::accumulate(skate.begin(), skate.end(), 0.0) / static_cast<double>(n), 0.0, 1};
  report.metrics["foot_skate_median"] = {sorted[sorted.size() / 2], 0.0, 1};

  report.counts = {{"generated", n},
                   {"primary", primary.size()},
                   {"test_clips", dataset.test.size()},
                   {"frames", pool.motions.front().frames()},
                   {"diversity_pairs", div_pairs},
                   {"subsample", sub_n},
                   {"groups", group_feats.size()}};
  // No wall-clock fields: reports must replay byte-identically.
  report.info = {{"mode", to_string(mode)}, {"evaluator_test_accuracy", evaluators.test_accuracy()}};
  if (mode == ConditionMode::Text && static_cast<int>(primary.size()) < config.rprecision_pool)
    report.info["r_precision"] = "skipped: fewer prompts than the pool size";
  report.config_hash = hash_hex(config.to_json().dump());
  report.validate();
  return report;
}

EvalReport evaluate(const X0Model& model, ConditionMode mode, const LabeledDataset& dataset, const DatasetStats& stats,
                    const Evaluators& evaluators, const NoiseSchedule& schedule, const EvalConfig& config) {
  const auto pool = generate_pool(model, mode, dataset, stats, schedule, config, config.guidance_scale);
  auto report = score_pool(pool, mode, dataset, evaluators, config);
  report.info["guidance_scale"] = config.guidance_scale;
  return report;
}

std::string SweepResult::csv() const {
  std::vector<std::string> names;
  for (const auto& r : reports)
    for (const auto& [name, v] : r.metrics)
      if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
  std::ostringstream os;
  os << "s";
  for (const auto& n : names) os << "," << n << "," << n << "_hw";
  os << "\n" << std::setprecision(10);
  for (std::size_t i = 0; i < scales.size(); ++i) {
    os << scales[i];
    for (const auto& n : names) {
      const auto it = reports[i].metrics.find(n);
      if (it == reports[i].metrics.end())
        os << ",,";
      else
        os << "," << it->second.value << "," << it->second.half_width;
    }
    os << "\n";
  }
  return os.str();
}

std::string SweepResult::table() const {
  std::ostringstream os;
  const std::vector<std::string> cols = {"fid", "diversity", "multimodality", relevance_metric};
  os << std::setw(6) << "s";
  for (const auto& c : cols) os << "  " << std::setw(24) << c;
  os << "\n" << std::fixed;
  for (std::size_t i = 0; i < scales.size(); ++i) {
    os << std::setw(6) << std::setprecision(2) << scales[i];
    for (const auto& c : cols) {
      const auto it = reports[i].metrics.find(c);
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4);
      if (it != reports[i].metrics.end()) cell << it->second.value << " +/- " << it->second.half_width;
      os << "  " << std::setw(24) << cell.str();
    }
    os << "\n";
  }
  os << std::setprecision(3) << "spearman(" << relevance_metric << ", s <= 2.5) = " << relevance_spearman
     << "\nspearman(diversity, s) = " << diversity_spearman << "\n";
  return os.str();
}

nlohmann::json SweepResult::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < scales.size(); ++i) rows.push_back({{"s", scales[i]}, {"report", reports[i].to_json()}});
  return {{"rows", rows},
          {"relevance_metric", relevance_metric},
          {"relevance_spearman", relevance_spearman},
          {"diversity_spearman", diversity_spearman}};
}

SweepResult guidance_sweep(const X0Model& model, ConditionMode mode, const LabeledDataset& dataset,
                           const DatasetStats& stats, const Evaluators& evaluators, const NoiseSchedule& schedule,
                           const std::vector<double>& scales, const EvalConfig& config,
                           const std::function<void(double, const EvalReport&)>& on_row) {
  if (scales.empty()) throw ValidationError("sweep: no guidance scales");
  if (mode == ConditionMode::Unconditional) throw ValidationError("sweep: guidance needs a conditional model");
  for (double s : scales)
    if (!std::isfinite(s)) throw ValidationError("sweep: guidance scales must be finite");
  SweepResult result;
  result.relevance_metric = mode == ConditionMode::Text ? "r_precision_top3" : "recognition_accuracy";
  for (double s : scales) {
    // Same seed for every s: each row starts from the same x_T draws.
    const auto pool = generate_pool(model, mode, dataset, stats, schedule, config, s);
    auto report = score_pool(pool, mode, dataset, evaluators, config);
    report.info["guidance_scale"] = s;
    if (on_row) on_row(s, report);
    result.scales.push_back(s);
    result.reports.push_back(std::move(report));
  }
  std::vector<double> rel_s, rel_v, div_s, div_v;
  for (std::size_t i = 0; i < scales.size(); ++i) {
    const auto& m = result.reports[i].metrics;
    if (scales[i] <= 2.5 && m.count(result.relevance_metric)) {
      rel_s.push_back(scales[i]);
      rel_v.push_back(m.at(result.relevance_metric).value);
    }
    div_s.push_back(scales[i]);
    div_v.push_back(m.at("diversity").value);
  }
  if (rel_s.size() >= 2) result.relevance_spearman = spearman(rel_s, rel_v);
  if (div_s.size() >= 2) result.diversity_spearman = spearman(div_s, div_v);
  return result;
}

}  // namespace mdm
