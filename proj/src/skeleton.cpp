#include "mdm/skeleton.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

#include "mdm/error.hpp"
#include "mdm/hash.hpp"

namespace mdm {

Skeleton::Skeleton(std::vector<std::string> joint_names, std::vector<int> parents,
                   std::vector<Vec3> offsets, std::vector<int> foot_joints, double ground_height)
    : names_(std::move(joint_names)),
      parents_(std::move(parents)),
      offsets_(std::move(offsets)),
      foot_joints_(std::move(foot_joints)),
      ground_height_(ground_height) {
  const auto n = static_cast<int>(names_.size());
  if (n < 1) throw ValidationError("skeleton needs at least one joint");
  if (static_cast<int>(parents_.size()) != n || static_cast<int>(offsets_.size()) != n) {
    throw ShapeError("skeleton: names/parents/offsets length mismatch");
  }
  if (parents_[0] != kNoParent) throw ValidationError("skeleton: joint 0 must be the root");

  std::vector<std::vector<int>> children(n);
  for (int j = 1; j < n; ++j) {
    const int p = parents_[j];
    if (p < 0 || p >= n || p == j) {
      throw ValidationError("skeleton: joint " + names_[j] + " has invalid parent");
    }
    if (!(offsets_[j].norm() > 0.0)) {
      throw ValidationError("skeleton: joint " + names_[j] + " has zero-length offset");
    }
    children[p].push_back(j);
  }
  // Breadth-first from the root; any joint not reached sits on a cycle.
  std::queue<int> pending;
  pending.push(0);
  while (!pending.empty()) {
    const int j = pending.front();
    pending.pop();
    order_.push_back(j);
    for (int c : children[j]) pending.push(c);
  }
  if (static_cast<int>(order_.size()) != n) {
    throw ValidationError("skeleton: parent graph is not a tree rooted at joint 0");
  }
  for (int f : foot_joints_) {
    if (f < 0 || f >= n) throw ValidationError("skeleton: foot joint index out of range");
  }
  if (!std::isfinite(ground_height_)) throw ValidationError("skeleton: ground height must be finite");
}

Skeleton Skeleton::desk_default() {
  std::vector<std::string> names = {
      "pelvis",     "left_hip",       "left_knee",  "left_ankle", "right_hip",      "right_knee",
      "right_ankle", "spine",         "chest",      "neck",       "head",           "left_shoulder",
      "left_elbow", "left_wrist",     "right_shoulder", "right_elbow", "right_wrist"};
  std::vector<int> parents = {kNoParent, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15};
  std::vector<Vec3> offsets = {
      Vec3(0, 0, 0),       Vec3(0.10, -0.05, 0), Vec3(0, -0.45, 0),     Vec3(0, -0.42, 0),
      Vec3(-0.10, -0.05, 0), Vec3(0, -0.45, 0),  Vec3(0, -0.42, 0),     Vec3(0, 0.12, 0),
      Vec3(0, 0.25, 0),    Vec3(0, 0.20, 0),     Vec3(0, 0.12, 0),      Vec3(0.18, 0.15, 0),
      Vec3(0, -0.28, 0),   Vec3(0, -0.25, 0),    Vec3(-0.18, 0.15, 0),  Vec3(0, -0.28, 0),
      Vec3(0, -0.25, 0)};
  return Skeleton(std::move(names), std::move(parents), std::move(offsets), {3, 6}, 0.0);
}

int Skeleton::joint_index(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw ValidationError("unknown joint '" + name + "'");
  return static_cast<int>(it - names_.begin());
}

double Skeleton::rest_root_height() const {
  // Accumulate rest offsets; the lowest foot sets the standing height.
  std::vector<Vec3> rest(names_.size(), Vec3::Zero());
  for (int j : order_) {
    if (j != 0) rest[j] = rest[parents_[j]] + offsets_[j];
  }
  double lowest = 0.0;
  for (int f : foot_joints_) lowest = std::min(lowest, rest[f].y());
  return -lowest;
}

nlohmann::json Skeleton::to_json() const {
  nlohmann::json j;
  j["joint_names"] = names_;
  j["parents"] = parents_;
  auto offs = nlohmann::json::array();
  for (const auto& o : offsets_) offs.push_back({o.x(), o.y(), o.z()});
  j["offsets"] = offs;
  j["foot_joints"] = foot_joints_;
  j["ground_height"] = ground_height_;
  return j;
}

Skeleton Skeleton::from_json(const nlohmann::json& j) {
  try {
    std::vector<Vec3> offsets;
    for (const auto& o : j.at("offsets")) {
      if (o.size() != 3) throw FormatError("skeleton offset must have 3 components");
      offsets.emplace_back(o[0].get<double>(), o[1].get<double>(), o[2].get<double>());
    }
    return Skeleton(j.at("joint_names").get<std::vector<std::string>>(),
                    j.at("parents").get<std::vector<int>>(), std::move(offsets),
                    j.at("foot_joints").get<std::vector<int>>(), j.value("ground_height", 0.0));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed skeleton: ") + e.what());
  }
}

std::string Skeleton::fingerprint() const { return hash_hex(to_json().dump()); }

bool Skeleton::operator==(const Skeleton& other) const {
  return names_ == other.names_ && parents_ == other.parents_ && offsets_ == other.offsets_ &&
         foot_joints_ == other.foot_joints_ && ground_height_ == other.ground_height_;
}

PoseRotations::PoseRotations(int n_frames, int n_joints)
    : frames(n_frames),
      joints(n_joints),
      root_translation(static_cast<std::size_t>(n_frames), Vec3::Zero()),
      rotation(static_cast<std::size_t>(n_frames) * n_joints, Quat::Identity()) {}

JointPositions forward_kinematics(const Skeleton& skeleton, const PoseRotations& pose) {
  const int J = skeleton.num_joints();
  if (pose.joints != J) throw ShapeError("forward_kinematics: pose joint count differs from skeleton");
  if (pose.frames < 1) throw ShapeError("forward_kinematics: pose has no frames");
  if (static_cast<int>(pose.root_translation.size()) != pose.frames ||
      pose.rotation.size() != static_cast<std::size_t>(pose.frames) * J) {
    throw ShapeError("forward_kinematics: pose buffers inconsistent with frame count");
  }

  JointPositions out(pose.frames, J);
  std::vector<Eigen::Matrix3d> global(J);
  for (int f = 0; f < pose.frames; ++f) {
    for (int j : skeleton.topological_order()) {
      const Quat& q = pose.at(f, j);
      if (std::abs(q.norm() - 1.0) > kUnitQuatTolerance) {
        throw ValidationError("forward_kinematics: non-unit quaternion at frame " + std::to_string(f) +
                              ", joint " + std::to_string(j));
      }
      const Eigen::Matrix3d local = q.toRotationMatrix();
      const int p = skeleton.parent(j);
      if (p == kNoParent) {
        global[j] = local;
        out.at(f, j) = pose.root_translation[f];
      } else {
        global[j] = global[p] * local;
        out.at(f, j) = out.at(f, p) + global[p] * skeleton.offset(j);
      }
    }
  }
  return out;
}

ContactMask detect_foot_contacts(const JointPositions& positions, const Skeleton& skeleton,
                                 const ContactThresholds& thresholds) {
  if (positions.frames < 2) throw ShapeError("detect_foot_contacts: need at least 2 frames");
  if (positions.joints != skeleton.num_joints()) {
    throw ShapeError("detect_foot_contacts: joint count differs from skeleton");
  }
  const auto& feet = skeleton.foot_joints();
  ContactMask mask(positions.frames, skeleton.num_feet());
  for (int f = 0; f + 1 < positions.frames; ++f) {
    for (int k = 0; k < mask.feet; ++k) {
      const Vec3& p = positions.at(f, feet[k]);
      const double speed = (positions.at(f + 1, feet[k]) - p).norm();
      const double height = p.y() - skeleton.ground_height();
      mask.at(f, k) = (speed < thresholds.velocity && height < thresholds.height) ? 1 : 0;
    }
  }
  for (int k = 0; k < mask.feet; ++k) mask.at(positions.frames - 1, k) = mask.at(positions.frames - 2, k);
  return mask;
}

}  // namespace mdm
