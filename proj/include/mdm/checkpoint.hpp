#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "mdm/denoiser.hpp"
#include "mdm/optim.hpp"

namespace mdm {

// Binary container: 8-byte magic, u64 little-endian header length, JSON
// header listing every tensor (name, shape, offset, bytes), then
// little-endian float32 data.
struct TensorArchive {
  nlohmann::json header = nlohmann::json::object();
  NamedTensors tensors;

  const torch::Tensor& get(const std::string& name) const;  // throws FormatError when missing
  bool has(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const std::string& magic, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path, const std::string& magic);

struct CheckpointMeta {
  std::int64_t step = 0;
  Skeleton skeleton = Skeleton::desk_default();
  FeatureLayout layout;
  double fps = 20.0;
  std::vector<std::string> class_names;
  DatasetStats stats;
  std::string corpus_hash;
  nlohmann::json train_config = nlohmann::json::object();
  nlohmann::json metrics = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, MotionDenoiser& model, const CheckpointMeta& meta,
                     const AdamState* optimizer = nullptr);

struct LoadedCheckpoint {
  DenoiserConfig config;
  MotionDenoiser model{nullptr};
  CheckpointMeta meta;
  std::optional<AdamState> optimizer;
  std::string config_hash;
};

// `expected`, when given, must equal the stored config exactly.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, std::shared_ptr<const TextEmbedder> text = nullptr,
                                 const DenoiserConfig* expected = nullptr);

std::string config_hash(const DenoiserConfig& config);

}  // namespace mdm
