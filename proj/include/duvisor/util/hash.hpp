#pragma once

#include <cstddef>
#include <cstdint>

namespace duvisor {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;

/// FNV-1a, 64-bit. Chaining calls through `seed` hashes the concatenation.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed = kFnvOffset)
{
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Folds one 64-bit value into a running digest.
inline std::uint64_t fnv1a_chain(std::uint64_t acc, std::uint64_t value)
{
  return fnv1a(&value, sizeof value, acc);
}

} // namespace duvisor
