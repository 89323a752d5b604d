#include "mdm/editing.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mdm/error.hpp"

namespace mdm {

namespace {

void observe_joint(EditMask& mask, const FeatureLayout& layout, int joint) {
  for (int f = 0; f < mask.frames(); ++f) {
    for (int k = 0; k < 3; ++k) {
      mask.set(f, layout.position(joint) + k, true);
      mask.set(f, layout.velocity(joint) + k, true);
    }
    for (int k = 0; k < 4; ++k) mask.set(f, layout.rotation(joint) + k, true);
  }
}

void merge(EditMask& into, const EditMask& from) {
  for (int f = 0; f < into.frames(); ++f) {
    for (int c = 0; c < into.channels(); ++c) {
      if (from.observed(f, c)) into.set(f, c, true);
    }
  }
}

int joint_from_json(const nlohmann::json& j, const Skeleton& skeleton) {
  if (j.is_string()) return skeleton.joint_index(j.get<std::string>());
  if (j.is_number_integer()) {
    const int idx = j.get<int>();
    if (idx < 0 || idx >= skeleton.num_joints()) throw ValidationError("edit spec: joint index " + std::to_string(idx) + " out of range");
    return idx;
  }
  throw ValidationError("edit spec: joints must be names or indices");
}

}  // namespace

EditMask make_inbetween_mask(int frames, int channels, double prefix_frac, double suffix_frac) {
  if (frames < 4) throw ValidationError("inbetween mask: need at least 4 frames");
  if (channels < 1) throw ValidationError("inbetween mask: need at least 1 channel");
  if (!(prefix_frac >= 0.0 && prefix_frac < 1.0) || !(suffix_frac >= 0.0 && suffix_frac < 1.0) ||
      !(prefix_frac + suffix_frac < 1.0)) {
    throw ValidationError("inbetween mask: prefix and suffix fractions must be in [0, 1) with sum < 1");
  }
  const int pre = static_cast<int>(std::floor(frames * prefix_frac));
  const int suf = static_cast<int>(std::floor(frames * suffix_frac));
  if (pre + suf == 0) throw ValidationError("inbetween mask: fractions leave no frame observed");
  EditMask m(frames, channels);
  for (int f = 0; f < frames; ++f) {
    if (f < pre || f >= frames - suf) {
      for (int c = 0; c < channels; ++c) m.set(f, c, true);
    }
  }
  return m;
}

EditMask make_bodypart_mask(int frames, const Skeleton& skeleton, const FeatureLayout& layout,
                            const std::vector<int>& fixed_joints) {
  if (fixed_joints.empty()) throw ValidationError("body-part mask: no fixed joints given");
  if (layout.joints != skeleton.num_joints() || layout.feet != skeleton.num_feet()) {
    throw ShapeError("body-part mask: layout does not match the skeleton");
  }
  if (frames < 1) throw ValidationError("body-part mask: need at least 1 frame");
  EditMask m(frames, layout.dim());
  const std::set<int> fixed(fixed_joints.begin(), fixed_joints.end());
  for (int j : fixed) {
    if (j < 0 || j >= skeleton.num_joints()) throw ValidationError("body-part mask: unknown joint " + std::to_string(j));
    observe_joint(m, layout, j);
  }
  for (int f = 0; f < frames; ++f) {
    if (fixed.count(0)) {
      for (int k = 0; k < 3; ++k) m.set(f, layout.root_velocity() + k, true);
    }
    for (int k = 0; k < layout.feet; ++k) {
      if (fixed.count(skeleton.foot_joints()[k])) m.set(f, layout.contact(k), true);
    }
  }
  return m;
}

std::vector<int> lower_body_joints(const Skeleton& skeleton) {
  // root children whose subtree holds a foot start a leg
  const int J = skeleton.num_joints();
  std::vector<int> branch(J, -1);
  for (int j : skeleton.topological_order()) {
    const int p = skeleton.parent(j);
    if (p == kNoParent) continue;
    branch[j] = p == 0 ? j : branch[p];
  }
  std::set<int> legs;
  for (int foot : skeleton.foot_joints()) {
    if (branch[foot] >= 0) legs.insert(branch[foot]);
  }
  std::vector<int> out{0};
  for (int j = 1; j < J; ++j) {
    if (legs.count(branch[j])) out.push_back(j);
  }
  return out;
}

std::vector<int> upper_body_joints(const Skeleton& skeleton) {
  const auto lower = lower_body_joints(skeleton);
  const std::set<int> l(lower.begin(), lower.end());
  std::vector<int> out;
  for (int j = 0; j < skeleton.num_joints(); ++j) {
    if (!l.count(j)) out.push_back(j);
  }
  return out;
}

EditMask mask_from_json(const nlohmann::json& spec, int frames, const Skeleton& skeleton,
                        const FeatureLayout& layout) {
  if (!spec.is_object()) throw ValidationError("edit spec must be a JSON object");
  EditMask mask(frames, layout.dim());
  bool used = false;
  try {
    if (spec.contains("preset")) {
      used = true;
      const auto preset = spec.at("preset").get<std::string>();
      if (preset == "inbetween") {
        merge(mask, make_inbetween_mask(frames, layout.dim(), spec.value("prefix", 0.25), spec.value("suffix", 0.25)));
      } else if (preset == "upper_body") {
        auto fixed = lower_body_joints(skeleton);
        if (spec.value("free_root", false)) fixed.erase(std::remove(fixed.begin(), fixed.end(), 0), fixed.end());
        merge(mask, make_bodypart_mask(frames, skeleton, layout, fixed));
      } else if (preset == "lower_body") {
        merge(mask, make_bodypart_mask(frames, skeleton, layout, upper_body_joints(skeleton)));
      } else {
        throw ValidationError("edit spec: unknown preset '" + preset + "' (inbetween, upper_body, lower_body)");
      }
    }
    if (spec.contains("fixed_joints")) {
      used = true;
      std::vector<int> fixed;
      for (const auto& j : spec.at("fixed_joints")) fixed.push_back(joint_from_json(j, skeleton));
      merge(mask, make_bodypart_mask(frames, skeleton, layout, fixed));
    }
    if (spec.contains("observed")) {
      used = true;
      for (const auto& block : spec.at("observed")) {
        const auto range = block.at("frames").get<std::vector<int>>();
        if (range.size() != 2 || range[0] < 0 || range[1] > frames || range[0] >= range[1]) {
          throw ValidationError("edit spec: observed frames must be [start, end) within [0, " + std::to_string(frames) + "]");
        }
        std::vector<int> channels;
        if (block.at("channels").is_string()) {
          if (block.at("channels").get<std::string>() != "all") throw ValidationError("edit spec: channels must be a list or \"all\"");
          for (int c = 0; c < layout.dim(); ++c) channels.push_back(c);
        } else {
          channels = block.at("channels").get<std::vector<int>>();
        }
        for (int c : channels) {
          if (c < 0 || c >= layout.dim()) throw ValidationError("edit spec: channel " + std::to_string(c) + " out of range");
          for (int f = range[0]; f < range[1]; ++f) mask.set(f, c, true);
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("edit spec: ") + e.what());
  }
  if (!used) throw ValidationError("edit spec needs one of preset, fixed_joints, observed");
  if (!mask.any()) throw ValidationError("edit spec marks nothing as observed");
  return mask;
}

MotionSequence edit(const X0Model& model, const NoiseSchedule& schedule, const EditSpec& spec,
                    const Condition& condition, double guidance_scale, const DatasetStats& stats,
                    std::uint64_t seed) {
  spec.validate();
  auto out = sample(model, {condition}, spec.reference.frames(), guidance_scale, schedule, stats, seed, spec);
  return std::move(out.front());
}

Eigen::VectorXd seam_velocities(const MotionSequence& motion, const EditMask& mask) {
  if (mask.frames() != motion.frames() || mask.channels() != motion.dim()) throw ShapeError("seam: mask shape differs");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(motion.dim());
  for (int f = 0; f + 1 < motion.frames(); ++f) {
    for (int c = 0; c < motion.dim(); ++c) {
      if (mask.observed(f, c) != mask.observed(f + 1, c)) {
        out[c] = std::max(out[c], static_cast<double>(std::abs(motion.features(f + 1, c) - motion.features(f, c))));
      }
    }
  }
  return out;
}

double observed_max_error(const MotionSequence& motion, const EditSpec& spec) {
  if (motion.frames() != spec.mask.frames() || motion.dim() != spec.mask.channels()) {
    throw ShapeError("observed error: motion shape differs from the mask");
  }
  double worst = 0.0;
  for (int f = 0; f < motion.frames(); ++f) {
    for (int c = 0; c < motion.dim(); ++c) {
      if (spec.mask.observed(f, c)) {
        worst = std::max(worst, static_cast<double>(std::abs(motion.features(f, c) - spec.reference.features(f, c))));
      }
    }
  }
  return worst;
}

}  // namespace mdm
