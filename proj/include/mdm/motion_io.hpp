#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "mdm/motion.hpp"

namespace mdm {

// Motion container:
//   "MDMMOTN1" | u64 LE header length | UTF-8 JSON header | zero padding |
//   float32 LE row-major N x F features at header["data"]["offset"].
// The header carries skeleton, layout, fps and optional labels / stats.
inline constexpr char kMotionMagic[9] = "MDMMOTN1";

struct MotionFile {
  MotionSequence motion;
  Skeleton skeleton = Skeleton::desk_default();
  std::optional<ClipLabel> label;
  std::optional<DatasetStats> stats;
  // Free-form provenance (sampling condition, seed, ...).
  nlohmann::json meta = nlohmann::json::object();
};

void write_motion_file(const std::filesystem::path& path, const MotionFile& file);
std::string encode_motion_file(const MotionFile& file);
// Reads either the binary container or the pure-JSON fixture form
// ({"skeleton":..., "fps":..., "features": [[...], ...]}).
MotionFile read_motion_file(const std::filesystem::path& path);
MotionFile decode_motion_file(const std::string& bytes);

nlohmann::json motion_to_json(const MotionFile& file);  // pure-JSON form

// Corpus directory: index.json + clips/clip_NNNNN.motion.
void save_dataset(const std::filesystem::path& dir, const LabeledDataset& ds, const nlohmann::json& provenance);
LabeledDataset load_dataset(const std::filesystem::path& dir);
// Fingerprint of the corpus (hash of index.json, which lists per-clip hashes).
std::string dataset_hash(const std::filesystem::path& dir);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace mdm
