#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>

#include "duvisor/mmu/pmc.hpp"

namespace duvisor::mmu {

/// Who issued a physical access. Guest traffic is everything derived from
/// V-mode execution or from stage-2 translation on behalf of a VM.
enum class Origin : std::uint8_t { Host, Guest };

struct MemAccess
{
  std::uint64_t hpa = 0;
  std::uint64_t len = 0;
  bool write = false;
  Origin origin = Origin::Host;
};

/// Sparse host RAM. Untouched pages read as zero and cost nothing.
class PhysicalMemory
{
public:
  PhysicalMemory(std::uint64_t base, std::uint64_t size);

  std::uint64_t base() const { return base_; }
  std::uint64_t size() const { return size_; }
  bool contains(std::uint64_t hpa, std::uint64_t len) const;

  void read(std::uint64_t hpa, std::span<std::uint8_t> out, Origin origin = Origin::Host) const;
  void write(std::uint64_t hpa, std::span<const std::uint8_t> in, Origin origin = Origin::Host);

  std::uint64_t read_u64(std::uint64_t hpa, Origin origin = Origin::Host) const;
  void write_u64(std::uint64_t hpa, std::uint64_t value, Origin origin = Origin::Host);

  /// Reads `len` bytes (1..8) little-endian.
  std::uint64_t read_uint(std::uint64_t hpa, unsigned len, Origin origin = Origin::Host) const;
  void write_uint(std::uint64_t hpa, std::uint64_t value, unsigned len,
                  Origin origin = Origin::Host);

  void zero_page(std::uint64_t hpa);
  /// Drops every resident page inside [hpa, hpa+len).
  void zero_range(std::uint64_t hpa, std::uint64_t len);
  std::size_t resident_pages() const { return pages_.size(); }

  using Observer = std::function<void(const MemAccess&)>;
  void set_observer(Observer obs) { observer_ = std::move(obs); }

private:
  using Page = std::array<std::uint8_t, kPageSize>;

  void check(std::uint64_t hpa, std::uint64_t len) const;
  void notify(std::uint64_t hpa, std::uint64_t len, bool write, Origin origin) const;

  std::uint64_t base_;
  std::uint64_t size_;
  std::unordered_map<std::uint64_t, std::unique_ptr<Page>> pages_;
  Observer observer_;
};

} // namespace duvisor::mmu
