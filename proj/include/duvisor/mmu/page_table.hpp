#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "duvisor/mmu/phys_mem.hpp"

namespace duvisor::mmu {

/// Three-level radix tree over a 39-bit address space, 4 KiB pages,
/// 512 eight-byte entries per node. Both stages share the entry format.
inline constexpr int kLevels = 3;
inline constexpr unsigned kAddrBits = 39;
inline constexpr std::uint64_t kAddrLimit = std::uint64_t{1} << kAddrBits;
inline constexpr std::uint64_t kEntriesPerNode = 512;

namespace pte {

inline constexpr std::uint64_t kValid = 1;
inline constexpr std::uint64_t kUser = 1u << 4;
inline constexpr unsigned kPermShift = 1;
inline constexpr unsigned kPpnShift = 10;
inline constexpr std::uint64_t kPpnMask = (std::uint64_t{1} << 44) - 1;

constexpr std::uint64_t make_leaf(std::uint64_t pa, std::uint8_t perms)
{
  return ((pa >> kPageShift) << kPpnShift) | (static_cast<std::uint64_t>(perms & kPermRWX) << kPermShift) |
         kUser | kValid;
}

constexpr std::uint64_t make_table(std::uint64_t pa)
{
  return ((pa >> kPageShift) << kPpnShift) | kValid;
}

constexpr bool valid(std::uint64_t e) { return (e & kValid) != 0; }
constexpr std::uint8_t perms(std::uint64_t e)
{
  return static_cast<std::uint8_t>((e >> kPermShift) & kPermRWX);
}
constexpr bool leaf(std::uint64_t e) { return valid(e) && perms(e) != 0; }
constexpr std::uint64_t address(std::uint64_t e)
{
  return ((e >> kPpnShift) & kPpnMask) << kPageShift;
}

} // namespace pte

constexpr unsigned level_index(std::uint64_t addr, int level)
{
  return static_cast<unsigned>((addr >> (kPageShift + 9 * level)) & (kEntriesPerNode - 1));
}

struct Mapping
{
  std::uint64_t gpa = 0;
  std::uint64_t hpa = 0;
  std::uint8_t perms = 0;

  bool operator==(const Mapping&) const = default;
};

enum class MapStatus : std::uint8_t { Installed, AlreadyMapped, Conflict };

std::string perms_string(std::uint8_t perms);

/// GPA to HPA table owned and edited by the user-level hypervisor. Node pages
/// live in host RAM and are drawn from the allocator supplied at
/// construction; legality of any HPA is left to the PMC check at access time.
class StageTwoPageTable
{
public:
  /// Returns the HPA of a fresh zeroed page.
  using NodeAllocator = std::function<std::uint64_t()>;

  StageTwoPageTable(PhysicalMemory& mem, NodeAllocator alloc);

  std::uint64_t root() const { return root_; }
  const std::set<std::uint64_t>& node_pages() const { return node_pages_; }

  /// Installs gpa -> hpa. Remapping a live GPA to a different HPA is refused;
  /// the same mapping again is a no-op.
  MapStatus map(std::uint64_t gpa, std::uint64_t hpa, std::uint8_t perms);
  bool unmap(std::uint64_t gpa);

  /// Software walk from the hypervisor's side; no PMC involvement.
  std::optional<Mapping> lookup(std::uint64_t gpa) const;
  std::vector<Mapping> mappings() const;

  /// One line per leaf: "0x<gpa> -> 0x<hpa> <rwx>", ascending GPA.
  std::string dump() const;

  /// Overwrites the entry at `level` on the walk path of `gpa`, creating
  /// intermediate nodes as needed. Lets tests and adversarial hypervisors
  /// point table links at arbitrary HPAs.
  void set_raw_entry(std::uint64_t gpa, int level, std::uint64_t entry);

private:
  std::uint64_t new_node();
  /// Address of the entry for `gpa` at `level`; creates nodes above it.
  std::uint64_t entry_address(std::uint64_t gpa, int level);

  PhysicalMemory& mem_;
  NodeAllocator alloc_;
  std::uint64_t root_ = 0;
  std::set<std::uint64_t> node_pages_;
};

/// Guest-owned first-stage table. Its nodes sit at GPAs inside guest RAM,
/// so building it needs a way to reach guest memory.
struct StageOnePageTable
{
  std::uint64_t root = 0;  // GPA

  /// Writes a u64 at a GPA, or reports failure (for instance an S2 miss).
  using GpaWriter = std::function<bool(std::uint64_t gpa, std::uint64_t value)>;
  using GpaReader = std::function<std::optional<std::uint64_t>(std::uint64_t gpa)>;

  /// Ensures gva -> gpa with `perms`. Intermediate nodes are carved from the
  /// guest's page-table pool [pool_next, pool_end); a candidate is consumed
  /// only once it is linked. Returns false when guest memory could not be
  /// reached or the pool is empty; the call is idempotent and can be retried.
  bool map(std::uint64_t gva, std::uint64_t gpa, std::uint8_t perms, const GpaReader& read,
           const GpaWriter& write, std::uint64_t& pool_next, std::uint64_t pool_end) const;
};

} // namespace duvisor::mmu
