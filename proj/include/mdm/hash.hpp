#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace mdm {

// 64-bit FNV-1a. Used as a content fingerprint for corpora, configs and
// checkpoints; not a cryptographic hash.
class Fnv1a64 {
 public:
  void update(std::span<const std::byte> bytes);
  void update(std::string_view text);
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hash_hex(std::string_view text);
std::string hash_file(const std::filesystem::path& path);

// splitmix64 finalizer; derives independent per-item seeds from (seed, index).
std::uint64_t split_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace mdm
