#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace mdm {

using Vec3 = Eigen::Vector3d;
using Quat = Eigen::Quaterniond;

inline constexpr int kNoParent = -1;

// Kinematic tree. Joint 0 is the root; y is up and the ground is the plane
// y = ground_height.
class Skeleton {
 public:
  Skeleton(std::vector<std::string> joint_names, std::vector<int> parents,
           std::vector<Vec3> offsets, std::vector<int> foot_joints,
           double ground_height = 0.0);

  // 17 joints, feet = {left_ankle, right_ankle}; standing root height 0.92 m.
  static Skeleton desk_default();

  int num_joints() const { return static_cast<int>(names_.size()); }
  int num_feet() const { return static_cast<int>(foot_joints_.size()); }
  const std::vector<std::string>& joint_names() const { return names_; }
  const std::vector<int>& parents() const { return parents_; }
  int parent(int joint) const { return parents_[joint]; }
  const Vec3& offset(int joint) const { return offsets_[joint]; }
  const std::vector<Vec3>& offsets() const { return offsets_; }
  const std::vector<int>& foot_joints() const { return foot_joints_; }
  double ground_height() const { return ground_height_; }
  // Joints ordered so that every parent precedes its children.
  const std::vector<int>& topological_order() const { return order_; }
  int joint_index(const std::string& name) const;  // throws if unknown

  // Height of the root above the lowest foot joint in the rest pose.
  double rest_root_height() const;

  nlohmann::json to_json() const;
  static Skeleton from_json(const nlohmann::json& j);
  std::string fingerprint() const;

  bool operator==(const Skeleton& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<int> parents_;
  std::vector<Vec3> offsets_;
  std::vector<int> foot_joints_;
  double ground_height_;
  std::vector<int> order_;
};

// Local joint rotations (relative to parent) plus root translation, per frame.
struct PoseRotations {
  int frames = 0;
  int joints = 0;
  std::vector<Vec3> root_translation;  // [frames]
  std::vector<Quat> rotation;          // [frames * joints], row = frame

  PoseRotations() = default;
  PoseRotations(int n_frames, int n_joints);

  Quat& at(int frame, int joint) { return rotation[static_cast<std::size_t>(frame) * joints + joint]; }
  const Quat& at(int frame, int joint) const {
    return rotation[static_cast<std::size_t>(frame) * joints + joint];
  }
};

// Global joint positions, per frame.
struct JointPositions {
  int frames = 0;
  int joints = 0;
  std::vector<Vec3> data;  // [frames * joints]

  JointPositions() = default;
  JointPositions(int n_frames, int n_joints)
      : frames(n_frames), joints(n_joints), data(static_cast<std::size_t>(n_frames) * n_joints, Vec3::Zero()) {}

  Vec3& at(int frame, int joint) { return data[static_cast<std::size_t>(frame) * joints + joint]; }
  const Vec3& at(int frame, int joint) const { return data[static_cast<std::size_t>(frame) * joints + joint]; }
};

// f_i over the skeleton's foot joints; entries are 0 or 1.
struct ContactMask {
  int frames = 0;
  int feet = 0;
  std::vector<std::uint8_t> data;  // [frames * feet]

  ContactMask() = default;
  ContactMask(int n_frames, int n_feet)
      : frames(n_frames), feet(n_feet), data(static_cast<std::size_t>(n_frames) * n_feet, 0) {}

  std::uint8_t& at(int frame, int foot) { return data[static_cast<std::size_t>(frame) * feet + foot]; }
  std::uint8_t at(int frame, int foot) const { return data[static_cast<std::size_t>(frame) * feet + foot]; }
};

inline constexpr double kUnitQuatTolerance = 1e-6;

JointPositions forward_kinematics(const Skeleton& skeleton, const PoseRotations& pose);

struct ContactThresholds {
  double velocity = 0.01;  // m/frame
  double height = 0.05;    // m above ground
};

// f_i[j] = 1 iff |p_{i+1} - p_i| < velocity and height < height threshold (both
// strict); the last frame copies the decision of the second-to-last.
ContactMask detect_foot_contacts(const JointPositions& positions, const Skeleton& skeleton,
                                 const ContactThresholds& thresholds = {});

}  // namespace mdm
