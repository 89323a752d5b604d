#include "mdm/hash.hpp"

#include <array>
#include <cstdio>
#include <fstream>

#include "mdm/error.hpp"

namespace mdm {

void Fnv1a64::update(std::span<const std::byte> bytes) {
  for (std::byte b : bytes) {
    state_ ^= static_cast<std::uint64_t>(b);
    state_ *= 0x100000001b3ULL;
  }
}

void Fnv1a64::update(std::string_view text) {
  update(std::as_bytes(std::span(text.data(), text.size())));
}

std::string Fnv1a64::hex() const {
  std::array<char, 17> buf{};
  std::snprintf(buf.data(), buf.size(), "%016llx", static_cast<unsigned long long>(state_));
  return std::string(buf.data(), 16);
}

std::string hash_hex(std::string_view text) {
  Fnv1a64 h;
  h.update(text);
  return h.hex();
}

std::string hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  Fnv1a64 h;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    const auto n = static_cast<std::size_t>(in.gcount());
    h.update(std::string_view(buf.data(), n));
  }
  return h.hex();
}

std::uint64_t split_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace mdm
