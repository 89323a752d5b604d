#pragma once

#include <Eigen/Core>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mdm/skeleton.hpp"

namespace mdm {

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Per-frame channel layout:
//   root linear velocity (3) | joint positions (3J) | joint velocities (3J)
//   | joint rotations (4J, w x y z) | contact labels (|feet|)
struct FeatureLayout {
  int joints = 0;
  int feet = 0;

  FeatureLayout() = default;
  FeatureLayout(int n_joints, int n_feet) : joints(n_joints), feet(n_feet) {}
  explicit FeatureLayout(const Skeleton& s) : joints(s.num_joints()), feet(s.num_feet()) {}

  int root_velocity() const { return 0; }
  int positions() const { return 3; }
  int velocities() const { return 3 + 3 * joints; }
  int rotations() const { return 3 + 6 * joints; }
  int contacts() const { return 3 + 10 * joints; }
  int dim() const { return 3 + 10 * joints + feet; }

  int position(int joint) const { return positions() + 3 * joint; }
  int velocity(int joint) const { return velocities() + 3 * joint; }
  int rotation(int joint) const { return rotations() + 4 * joint; }
  int contact(int foot) const { return contacts() + foot; }

  nlohmann::json to_json() const;
  static FeatureLayout from_json(const nlohmann::json& j);
  bool operator==(const FeatureLayout&) const = default;
};

struct MotionSequence {
  FeatureMatrix features;  // N x F
  std::string skeleton_ref;
  double fps = 20.0;

  int frames() const { return static_cast<int>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }
};

// c: null (unconditioned), a text prompt, or an action class.
class Condition {
 public:
  struct Null {
    bool operator==(const Null&) const = default;
  };
  struct Text {
    std::string prompt;
    bool operator==(const Text&) const = default;
  };
  struct Action {
    int class_id = 0;
    bool operator==(const Action&) const = default;
  };

  Condition() = default;
  static Condition null() { return Condition(Null{}); }
  static Condition text(std::string prompt) { return Condition(Text{std::move(prompt)}); }
  static Condition action(int class_id);

  bool is_null() const { return std::holds_alternative<Null>(value_); }
  bool is_text() const { return std::holds_alternative<Text>(value_); }
  bool is_action() const { return std::holds_alternative<Action>(value_); }
  const std::string& prompt() const { return std::get<Text>(value_).prompt; }
  int class_id() const { return std::get<Action>(value_).class_id; }
  std::string describe() const;

  bool operator==(const Condition&) const = default;

 private:
  using Value = std::variant<Null, Text, Action>;
  explicit Condition(Value v) : value_(std::move(v)) {}
  Value value_ = Null{};
};

inline constexpr double kStdFloor = 1e-8;

// Kept in double so that standardizing low-variance channels does not pick up
// float rounding of the mean.
struct DatasetStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  int dim() const { return static_cast<int>(mean.size()); }
  // Per-channel mean and population std over all frames of the selected
  // motions; std floored at kStdFloor.
  static DatasetStats compute(const std::vector<MotionSequence>& motions, const std::vector<int>& indices);
  nlohmann::json to_json() const;
  static DatasetStats from_json(const nlohmann::json& j);
};

struct ClipLabel {
  int action = 0;
  std::string action_name;
  std::vector<std::string> captions;
};

struct LabeledDataset {
  Skeleton skeleton = Skeleton::desk_default();
  FeatureLayout layout;
  double fps = 20.0;
  std::vector<std::string> class_names;
  std::vector<MotionSequence> motions;
  std::vector<ClipLabel> labels;
  std::vector<int> train;
  std::vector<int> test;
  DatasetStats stats;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::size_t size() const { return motions.size(); }
  // Throws when splits overlap, miss indices or labels are out of range.
  void validate() const;
};

MotionSequence features_from_kinematics(const Skeleton& skeleton, const PoseRotations& pose,
                                        const ContactMask& contacts, double fps = 20.0);

struct DecodedMotion {
  JointPositions positions;  // from the position channels
  PoseRotations pose;        // rotations re-normalized; root translation = joint-0 position
  ContactMask contacts;      // contact channels thresholded at 0.5
};

DecodedMotion kinematics_from_features(const Skeleton& skeleton, const MotionSequence& motion);

// Positions obtained by running FK on the decoded rotation channels, with the
// root translation taken from the joint-0 position channels.
JointPositions fk_positions_from_features(const Skeleton& skeleton, const MotionSequence& motion);

MotionSequence normalize(const MotionSequence& motion, const DatasetStats& stats);
MotionSequence denormalize(const MotionSequence& motion, const DatasetStats& stats);

}  // namespace mdm
