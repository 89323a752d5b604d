#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "mdm/error.hpp"
#include "mdm/skeleton.hpp"

using namespace mdm;

namespace {

Quat random_unit_quat(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Quat q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized();
}

PoseRotations random_pose(const Skeleton& s, int frames, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  PoseRotations pose(frames, s.num_joints());
  for (int f = 0; f < frames; ++f) {
    pose.root_translation[f] = Vec3(u(rng), u(rng), u(rng));
    for (int j = 0; j < s.num_joints(); ++j) pose.at(f, j) = random_unit_quat(rng);
  }
  return pose;
}

Skeleton chain3() {
  return Skeleton({"root", "mid", "tip"}, {kNoParent, 0, 1}, {Vec3::Zero(), Vec3(0, 1, 0), Vec3(0, 1, 0)}, {2});
}

}  // namespace

TEST_CASE("identity rotations place joints at cumulative rest offsets") {
  const Skeleton s = Skeleton::desk_default();
  PoseRotations pose(1, s.num_joints());
  const JointPositions p = forward_kinematics(s, pose);
  // left ankle: pelvis -> hip -> knee -> ankle
  CHECK(p.at(0, 3).isApprox(Vec3(0.10, -0.92, 0.0), 1e-12));
  // right wrist: pelvis -> spine -> chest -> shoulder -> elbow -> wrist
  CHECK(p.at(0, 16).isApprox(Vec3(-0.18, 0.12 + 0.25 + 0.15 - 0.28 - 0.25, 0.0), 1e-12));
  CHECK(s.rest_root_height() == doctest::Approx(0.92));
}

TEST_CASE("root rotated 90 degrees about z swings a two-bone chain onto -x") {
  const Skeleton s = chain3();
  PoseRotations pose(1, 3);
  pose.root_translation[0] = Vec3(0.5, -1.0, 2.0);
  pose.at(0, 0) = Quat(std::sqrt(0.5), 0, 0, std::sqrt(0.5));
  // Oracle: hand-written R_z(90) = [[0,-1,0],[1,0,0],[0,0,1]] composed along the chain.
  Eigen::Matrix3d rz;
  rz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Vec3 mid = pose.root_translation[0] + rz * Vec3(0, 1, 0);
  const Vec3 tip = mid + rz * Eigen::Matrix3d::Identity() * Vec3(0, 1, 0);
  const JointPositions p = forward_kinematics(s, pose);
  CHECK((p.at(0, 2) - tip).norm() < 1e-12);
  CHECK((p.at(0, 2) - (Vec3(-2, 0, 0) + pose.root_translation[0])).norm() < 1e-12);
}

TEST_CASE("forward kinematics invariants on random poses") {
  const Skeleton s = Skeleton::desk_default();
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    PoseRotations pose = random_pose(s, 3, rng);
    const JointPositions p = forward_kinematics(s, pose);

    for (int f = 0; f < pose.frames; ++f) {
      for (int j = 1; j < s.num_joints(); ++j) {
        const double len = (p.at(f, j) - p.at(f, s.parent(j))).norm();
        CHECK(std::abs(len - s.offset(j).norm()) <= 1e-6 * s.offset(j).norm());
      }
    }

    const Vec3 shift(0.3, -1.25, 4.0);
    PoseRotations shifted = pose;
    for (auto& r : shifted.root_translation) r += shift;
    const JointPositions ps = forward_kinematics(s, shifted);
    for (std::size_t k = 0; k < p.data.size(); ++k) CHECK((ps.data[k] - p.data[k] - shift).norm() < 1e-12);

    const Quat R = random_unit_quat(rng);
    PoseRotations rotated = pose;
    for (int f = 0; f < pose.frames; ++f) rotated.at(f, 0) = (R * pose.at(f, 0)).normalized();
    const JointPositions pr = forward_kinematics(s, rotated);
    for (int f = 0; f < pose.frames; ++f) {
      const Vec3 root = pose.root_translation[f];
      for (int j = 0; j < s.num_joints(); ++j) {
        CHECK((pr.at(f, j) - (root + R * (p.at(f, j) - root))).norm() < 1e-6);
      }
    }

    const JointPositions again = forward_kinematics(s, pose);
    CHECK(std::memcmp(again.data.data(), p.data.data(), p.data.size() * sizeof(Vec3)) == 0);
  }
}

TEST_CASE("forward kinematics rejects bad input") {
  const Skeleton s = Skeleton::desk_default();
  PoseRotations pose(2, s.num_joints());
  pose.at(1, 4) = Quat(1.001, 0, 0, 0);
  CHECK_THROWS_AS(forward_kinematics(s, pose), ValidationError);
  PoseRotations wrong(2, 5);
  CHECK_THROWS_AS(forward_kinematics(s, wrong), ShapeError);
}

TEST_CASE("skeleton construction enforces tree invariants") {
  CHECK_THROWS_AS(Skeleton({"a", "b", "c"}, {kNoParent, 2, 1}, {Vec3::Zero(), Vec3(0, 1, 0), Vec3(0, 1, 0)}, {}),
                  ValidationError);
  CHECK_THROWS_AS(Skeleton({"a", "b"}, {kNoParent, 0}, {Vec3::Zero(), Vec3::Zero()}, {}), ValidationError);
  CHECK_THROWS_AS(Skeleton({"a", "b"}, {kNoParent, 0}, {Vec3::Zero(), Vec3(1, 0, 0)}, {2}), ValidationError);
  CHECK_THROWS_AS(Skeleton({"a", "b"}, {0, 0}, {Vec3::Zero(), Vec3(1, 0, 0)}, {}), ValidationError);
  const Skeleton s = Skeleton::desk_default();
  CHECK(Skeleton::from_json(s.to_json()) == s);
  CHECK_THROWS_AS(s.joint_index("tail"), ValidationError);
}

namespace {

JointPositions foot_track(const std::vector<Vec3>& foot, const Skeleton& s) {
  JointPositions p(static_cast<int>(foot.size()), s.num_joints());
  for (int f = 0; f < p.frames; ++f) p.at(f, s.foot_joints()[0]) = foot[f];
  return p;
}

}  // namespace

TEST_CASE("foot contacts follow the strict threshold rule") {
  const Skeleton s = chain3();
  SUBCASE("stationary on the ground") {
    const auto m = detect_foot_contacts(foot_track(std::vector<Vec3>(5, Vec3(0.2, 0.0, 0.1)), s), s);
    for (auto v : m.data) CHECK(v == 1);
  }
  SUBCASE("fast and high") {
    std::vector<Vec3> foot;
    for (int f = 0; f < 5; ++f) foot.emplace_back(0.5 * f, 1.0, 0.0);
    const auto m = detect_foot_contacts(foot_track(foot, s), s);
    for (auto v : m.data) CHECK(v == 0);
  }
  SUBCASE("displacement exactly at the threshold is not a contact") {
    const auto m = detect_foot_contacts(
        foot_track({Vec3(0, 0, 0), Vec3(0.25, 0, 0), Vec3(0.25, 0, 0)}, s), s, ContactThresholds{0.25, 0.05});
    CHECK(m.at(0, 0) == 0);
    CHECK(m.at(1, 0) == 1);
    CHECK(m.at(2, 0) == 1);  // copies frame 1
    const auto d = detect_foot_contacts(foot_track({Vec3(0, 0, 0), Vec3(0.01, 0, 0), Vec3(0.01, 0, 0)}, s), s);
    CHECK(d.at(0, 0) == 0);
  }
  SUBCASE("height exactly at the threshold is not a contact") {
    const auto m = detect_foot_contacts(foot_track(std::vector<Vec3>(3, Vec3(0, 0.25, 0)), s), s,
                                        ContactThresholds{0.01, 0.25});
    for (auto v : m.data) CHECK(v == 0);
  }
  SUBCASE("single frame is rejected") {
    CHECK_THROWS_AS(detect_foot_contacts(foot_track({Vec3::Zero()}, s), s), ShapeError);
  }
}
