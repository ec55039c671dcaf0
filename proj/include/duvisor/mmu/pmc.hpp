#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>

namespace duvisor::mmu {

inline constexpr std::uint64_t kPageSize = 4096;
inline constexpr std::uint64_t kPageShift = 12;

/// Permission bits shared by PMC regions and page-table entries.
enum Perm : std::uint8_t
{
  kPermR = 1,
  kPermW = 2,
  kPermX = 4,
  kPermRW = kPermR | kPermW,
  kPermRWX = kPermR | kPermW | kPermX,
};

enum class Access : std::uint8_t { Read, Write, Execute };

constexpr std::uint8_t perm_for(Access a)
{
  switch (a) {
    case Access::Read: return kPermR;
    case Access::Write: return kPermW;
    case Access::Execute: return kPermX;
  }
  return 0;
}

constexpr bool page_aligned(std::uint64_t v)
{
  return (v & (kPageSize - 1)) == 0;
}

/// One physical-memory-check range register.
struct PmcRegion
{
  std::uint64_t base = 0;
  std::uint64_t size = 0;
  std::uint8_t perms = 0;
  bool v_bit = false;
  bool valid = false;

  bool operator==(const PmcRegion&) const = default;
};

inline constexpr std::size_t kPmcSlots = 64;

struct PmcBank
{
  std::array<PmcRegion, kPmcSlots> slots{};

  std::optional<std::size_t> first_free() const;
  std::size_t valid_count() const;

  bool operator==(const PmcBank&) const = default;
};

/// Host-issued accesses (v_derived false) always pass. A V-derived access
/// passes only when [hpa, hpa+len) sits inside one valid V-bit region whose
/// permissions cover the access.
bool pmc_check(const PmcBank& bank, std::uint64_t hpa, std::uint64_t len, bool v_derived,
               Access access);

} // namespace duvisor::mmu
