#include "mdm/motion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mdm/error.hpp"

namespace mdm {

nlohmann::json FeatureLayout::to_json() const {
  return {{"joints", joints},
          {"feet", feet},
          {"dim", dim()},
          {"blocks",
           {{{"name", "root_velocity"}, {"offset", root_velocity()}, {"width", 3}},
            {{"name", "joint_positions"}, {"offset", positions()}, {"width", 3 * joints}},
            {{"name", "joint_velocities"}, {"offset", velocities()}, {"width", 3 * joints}},
            {{"name", "joint_rotations"}, {"offset", rotations()}, {"width", 4 * joints}},
            {{"name", "foot_contacts"}, {"offset", contacts()}, {"width", feet}}}}};
}

FeatureLayout FeatureLayout::from_json(const nlohmann::json& j) {
  FeatureLayout l(j.at("joints").get<int>(), j.at("feet").get<int>());
  if (j.contains("dim") && j.at("dim").get<int>() != l.dim()) {
    throw FormatError("layout: declared dim does not match joints/feet");
  }
  return l;
}

Condition Condition::action(int class_id) {
  if (class_id < 0) throw ValidationError("action class id must be non-negative");
  return Condition(Action{class_id});
}

std::string Condition::describe() const {
  if (is_null()) return "null";
  if (is_text()) return "text:" + prompt();
  return "action:" + std::to_string(class_id());
}

DatasetStats DatasetStats::compute(const std::vector<MotionSequence>& motions, const std::vector<int>& indices) {
  if (indices.empty()) throw ValidationError("stats: empty index set");
  const int F = motions.at(indices.front()).dim();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(F);
  double count = 0;
  for (int i : indices) {
    const auto& m = motions.at(i);
    if (m.dim() != F) throw ShapeError("stats: motions disagree on feature dim");
    sum += m.features.cast<double>().colwise().sum().transpose();
    count += m.frames();
  }
  const Eigen::VectorXd mean = sum / count;
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(F);
  for (int i : indices) {
    const Eigen::MatrixXd centered = motions[i].features.cast<double>().rowwise() - mean.transpose();
    sq += centered.array().square().colwise().sum().matrix().transpose();
  }
  DatasetStats s;
  s.mean = mean;
  s.std = (sq / count).cwiseSqrt().cwiseMax(kStdFloor);
  return s;
}

nlohmann::json DatasetStats::to_json() const {
  return {{"mean", std::vector<double>(mean.data(), mean.data() + mean.size())},
          {"std", std::vector<double>(std.data(), std.data() + std.size())}};
}

DatasetStats DatasetStats::from_json(const nlohmann::json& j) {
  const auto m = j.at("mean").get<std::vector<double>>();
  const auto s = j.at("std").get<std::vector<double>>();
  if (m.size() != s.size()) throw FormatError("stats: mean/std length mismatch");
  DatasetStats out;
  out.mean = Eigen::Map<const Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
  out.std = Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size())).cwiseMax(kStdFloor);
  return out;
}

void LabeledDataset::validate() const {
  if (motions.size() != labels.size()) throw ShapeError("dataset: motions/labels length mismatch");
  std::vector<int> seen(motions.size(), 0);
  for (const auto* split : {&train, &test}) {
    for (int i : *split) {
      if (i < 0 || static_cast<std::size_t>(i) >= motions.size()) throw ValidationError("dataset: split index out of range");
      if (seen[i]++) throw ValidationError("dataset: splits overlap");
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw ValidationError("dataset: splits do not cover all clips");
  for (const auto& l : labels) {
    if (l.action < 0 || l.action >= num_classes()) throw ValidationError("dataset: action label out of range");
  }
  for (const auto& m : motions) {
    if (m.dim() != layout.dim()) throw ShapeError("dataset: motion feature dim differs from layout");
  }
}

namespace {

Quat canonical(Quat q) {
  q.normalize();
  if (q.w() < 0) q.coeffs() *= -1.0;
  return q;
}

void require_finite(const MotionSequence& motion, const char* where) {
  if (!motion.features.allFinite()) throw NumericError(std::string(where) + ": non-finite feature values");
}

}  // namespace

MotionSequence features_from_kinematics(const Skeleton& skeleton, const PoseRotations& pose,
                                        const ContactMask& contacts, double fps) {
  if (pose.frames < 2) throw ShapeError("features_from_kinematics: need at least 2 frames");
  if (contacts.frames != pose.frames) throw ShapeError("features_from_kinematics: contact/pose frame counts differ");
  if (contacts.feet != skeleton.num_feet()) throw ShapeError("features_from_kinematics: contact width differs from feet");

  const FeatureLayout layout(skeleton);
  const int N = pose.frames;
  const int J = skeleton.num_joints();
  const JointPositions pos = forward_kinematics(skeleton, pose);

  MotionSequence m;
  m.fps = fps;
  m.skeleton_ref = skeleton.fingerprint();
  m.features = FeatureMatrix::Zero(N, layout.dim());
  for (int f = 0; f < N; ++f) {
    const int next = f + 1 < N ? f + 1 : f;
    const int prev = f + 1 < N ? f : f - 1;
    const Vec3 root_vel = pose.root_translation[next] - pose.root_translation[prev];
    for (int c = 0; c < 3; ++c) m.features(f, layout.root_velocity() + c) = static_cast<float>(root_vel[c]);
    for (int j = 0; j < J; ++j) {
      const Vec3 vel = pos.at(next, j) - pos.at(prev, j);
      const Quat q = canonical(pose.at(f, j));
      for (int c = 0; c < 3; ++c) {
        m.features(f, layout.position(j) + c) = static_cast<float>(pos.at(f, j)[c]);
        m.features(f, layout.velocity(j) + c) = static_cast<float>(vel[c]);
      }
      m.features(f, layout.rotation(j) + 0) = static_cast<float>(q.w());
      m.features(f, layout.rotation(j) + 1) = static_cast<float>(q.x());
      m.features(f, layout.rotation(j) + 2) = static_cast<float>(q.y());
      m.features(f, layout.rotation(j) + 3) = static_cast<float>(q.z());
    }
    for (int k = 0; k < contacts.feet; ++k) m.features(f, layout.contact(k)) = contacts.at(f, k) ? 1.0f : 0.0f;
  }
  return m;
}

DecodedMotion kinematics_from_features(const Skeleton& skeleton, const MotionSequence& motion) {
  const FeatureLayout layout(skeleton);
  if (motion.dim() != layout.dim()) throw ShapeError("kinematics_from_features: feature dim differs from layout");
  if (motion.frames() < 1) throw ShapeError("kinematics_from_features: empty motion");
  require_finite(motion, "kinematics_from_features");

  const int N = motion.frames();
  const int J = skeleton.num_joints();
  DecodedMotion out{JointPositions(N, J), PoseRotations(N, J), ContactMask(N, skeleton.num_feet())};
  for (int f = 0; f < N; ++f) {
    for (int j = 0; j < J; ++j) {
      const int p = layout.position(j);
      out.positions.at(f, j) = Vec3(motion.features(f, p), motion.features(f, p + 1), motion.features(f, p + 2));
      const int r = layout.rotation(j);
      Quat q(motion.features(f, r), motion.features(f, r + 1), motion.features(f, r + 2), motion.features(f, r + 3));
      out.pose.at(f, j) = q.norm() > 0 ? q.normalized() : Quat::Identity();
    }
    out.pose.root_translation[f] = out.positions.at(f, 0);
    for (int k = 0; k < layout.feet; ++k) out.contacts.at(f, k) = motion.features(f, layout.contact(k)) > 0.5f ? 1 : 0;
  }
  return out;
}

JointPositions fk_positions_from_features(const Skeleton& skeleton, const MotionSequence& motion) {
  return forward_kinematics(skeleton, kinematics_from_features(skeleton, motion).pose);
}

MotionSequence normalize(const MotionSequence& motion, const DatasetStats& stats) {
  if (stats.dim() != motion.dim()) throw ShapeError("normalize: stats dim differs from motion dim");
  MotionSequence out = motion;
  out.features = ((motion.features.cast<double>().rowwise() - stats.mean.transpose()).array().rowwise() /
                  stats.std.transpose().array())
                     .cast<float>();
  return out;
}

MotionSequence denormalize(const MotionSequence& motion, const DatasetStats& stats) {
  if (stats.dim() != motion.dim()) throw ShapeError("denormalize: stats dim differs from motion dim");
  MotionSequence out = motion;
  out.features = ((motion.features.cast<double>().array().rowwise() * stats.std.transpose().array()).rowwise() +
                  stats.mean.transpose().array())
                     .cast<float>();
  return out;
}

}  // namespace mdm
