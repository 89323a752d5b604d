#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdm/motion.hpp"

namespace mdm {

// Motion families the procedural generator knows how to synthesize.
const std::vector<std::string>& known_motion_families();

struct CorpusConfig {
  std::vector<std::string> families = known_motion_families();
  int per_family = 64;
  int frames_min = 40;
  int frames_max = 60;
  double fps = 20.0;
  double walk_speed_min = 0.8;  // m/s
  double walk_speed_max = 1.6;  // m/s
  double test_fraction = 0.2;
  ContactThresholds contacts;

  void validate() const;  // throws ValidationError naming the offending field
  nlohmann::json to_json() const;
  static CorpusConfig from_json(const nlohmann::json& j);
};

// Every clip is produced by a parameterized kinematic program on the desk
// skeleton; clip i draws its randomness from split_seed(seed, i) only.
LabeledDataset generate_procedural_corpus(const CorpusConfig& config, std::uint64_t seed);

// The kinematic program for one clip; exposed for tests.
struct GeneratedClip {
  PoseRotations pose;
  ContactMask contacts;
  MotionSequence motion;
  std::vector<std::string> captions;
  double horizontal_speed = 0.0;  // m/s, walk family only
};
GeneratedClip generate_clip(const Skeleton& skeleton, const std::string& family, int frames, double fps,
                            const CorpusConfig& config, std::uint64_t clip_seed);

}  // namespace mdm
