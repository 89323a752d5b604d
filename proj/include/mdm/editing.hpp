#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdm/diffusion.hpp"
#include "mdm/edit_types.hpp"
#include "mdm/motion.hpp"

namespace mdm {

// Rows [0, floor(N p)) and [N - floor(N s), N) fully observed.
EditMask make_inbetween_mask(int frames, int channels, double prefix_frac = 0.25, double suffix_frac = 0.25);

// Every channel of each fixed joint (position, velocity, rotation) on all
// frames; root-velocity channels iff joint 0 is fixed; a contact channel iff
// its foot joint is fixed.
EditMask make_bodypart_mask(int frames, const Skeleton& skeleton, const FeatureLayout& layout,
                            const std::vector<int>& fixed_joints);

// Pelvis and legs: the root plus every joint whose chain reaches it through a
// hip, i.e. all joints below the root except the spine subtree.
std::vector<int> lower_body_joints(const Skeleton& skeleton);
std::vector<int> upper_body_joints(const Skeleton& skeleton);

// Mask description, from JSON or CLI flags:
//   {"preset": "inbetween", "prefix": 0.25, "suffix": 0.25}
//   {"preset": "upper_body", "free_root": false}   edit the upper body, legs fixed
//   {"preset": "lower_body"}                       edit the legs, upper body fixed
//   {"fixed_joints": ["pelvis", "left_hip", 3]}
//   {"observed": [{"frames": [0, 10], "channels": [0, 1, 2]}, {"frames": [50, 60], "channels": "all"}]}
// Several keys combine by union.
EditMask mask_from_json(const nlohmann::json& spec, int frames, const Skeleton& skeleton,
                        const FeatureLayout& layout);

// Delegates to sample() with the edit spec; condition = null gives
// unconditional editing with the same weights.
MotionSequence edit(const X0Model& model, const NoiseSchedule& schedule, const EditSpec& spec,
                    const Condition& condition, double guidance_scale, const DatasetStats& stats,
                    std::uint64_t seed);

// Per channel: largest |x[i+1] - x[i]| over frame pairs where the mask
// switches between observed and generated on that channel (0 if it never does).
Eigen::VectorXd seam_velocities(const MotionSequence& motion, const EditMask& mask);

// Largest |x[i] - reference[i]| over observed entries.
double observed_max_error(const MotionSequence& motion, const EditSpec& spec);

}  // namespace mdm
