#pragma once

#include <cstdint>
#include <vector>

#include "mdm/motion.hpp"

namespace mdm {

// observed(i, c) = true marks entry (frame i, channel c) as fixed to the
// reference; false entries are generated.
class EditMask {
 public:
  EditMask() = default;
  EditMask(int frames, int channels, bool value = false)
      : frames_(frames), channels_(channels), data_(static_cast<std::size_t>(frames) * channels, value ? 1 : 0) {}

  int frames() const { return frames_; }
  int channels() const { return channels_; }
  bool observed(int frame, int channel) const { return data_[index(frame, channel)] != 0; }
  void set(int frame, int channel, bool value) { data_[index(frame, channel)] = value ? 1 : 0; }
  std::size_t count_observed() const;
  bool any() const { return count_observed() > 0; }
  bool all() const { return count_observed() == data_.size(); }
  const std::vector<std::uint8_t>& raw() const { return data_; }

 private:
  std::size_t index(int frame, int channel) const { return static_cast<std::size_t>(frame) * channels_ + channel; }
  int frames_ = 0;
  int channels_ = 0;
  std::vector<std::uint8_t> data_;
};

struct EditSpec {
  MotionSequence reference;  // un-normalized
  EditMask mask;

  void validate() const;  // frame/channel counts agree, mask not all-false
};

}  // namespace mdm
