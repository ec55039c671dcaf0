#include "duvisor/mmu/page_table.hpp"

#include <cstdio>

#include "duvisor/hw/types.hpp"

namespace duvisor::mmu {

std::string perms_string(std::uint8_t perms)
{
  std::string s = "---";
  if (perms & kPermR)
    s[0] = 'r';
  if (perms & kPermW)
    s[1] = 'w';
  if (perms & kPermX)
    s[2] = 'x';
  return s;
}

StageTwoPageTable::StageTwoPageTable(PhysicalMemory& mem, NodeAllocator alloc)
  : mem_(mem), alloc_(std::move(alloc))
{
  root_ = new_node();
}

std::uint64_t StageTwoPageTable::new_node()
{
  const std::uint64_t page = alloc_();
  if (!page_aligned(page))
    throw ConfigError("S2PT node allocator returned an unaligned page");
  node_pages_.insert(page);
  return page;
}

std::uint64_t StageTwoPageTable::entry_address(std::uint64_t gpa, int level)
{
  std::uint64_t node = root_;
  for (int l = kLevels - 1; l > level; --l) {
    const std::uint64_t addr = node + 8ull * level_index(gpa, l);
    std::uint64_t e = mem_.read_u64(addr);
    if (!pte::valid(e) || pte::leaf(e)) {
      const std::uint64_t child = new_node();
      e = pte::make_table(child);
      mem_.write_u64(addr, e);
    }
    node = pte::address(e);
  }
  return node + 8ull * level_index(gpa, level);
}

MapStatus StageTwoPageTable::map(std::uint64_t gpa, std::uint64_t hpa, std::uint8_t perms)
{
  if (!page_aligned(gpa) || !page_aligned(hpa))
    throw ConfigError("s2_map requires page-aligned GPA and HPA");
  if (gpa >= kAddrLimit)
    throw ConfigError("s2_map GPA beyond 39-bit guest space");
  if ((perms & kPermRWX) == 0)
    throw ConfigError("s2_map requires non-empty permissions");
  if (auto cur = lookup(gpa)) {
    if (cur->hpa == hpa && cur->perms == (perms & kPermRWX))
      return MapStatus::AlreadyMapped;
    return MapStatus::Conflict;
  }
  const std::uint64_t addr = entry_address(gpa, 0);
  mem_.write_u64(addr, pte::make_leaf(hpa, perms));
  return MapStatus::Installed;
}

bool StageTwoPageTable::unmap(std::uint64_t gpa)
{
  if (!lookup(gpa))
    return false;
  mem_.write_u64(entry_address(gpa, 0), 0);
  return true;
}

std::optional<Mapping> StageTwoPageTable::lookup(std::uint64_t gpa) const
{
  if (gpa >= kAddrLimit)
    return std::nullopt;
  std::uint64_t node = root_;
  for (int l = kLevels - 1; l >= 0; --l) {
    const std::uint64_t addr = node + 8ull * level_index(gpa, l);
    if (!mem_.contains(addr, 8))
      return std::nullopt;
    const std::uint64_t e = mem_.read_u64(addr);
    if (!pte::valid(e))
      return std::nullopt;
    if (pte::leaf(e)) {
      if (l != 0)
        return std::nullopt;
      return Mapping{gpa & ~(kPageSize - 1), pte::address(e), pte::perms(e)};
    }
    node = pte::address(e);
  }
  return std::nullopt;
}

std::vector<Mapping> StageTwoPageTable::mappings() const
{
  std::vector<Mapping> out;
  // Depth-first over the tree in index order yields ascending GPAs.
  auto walk = [&](auto&& self, std::uint64_t node, int level, std::uint64_t prefix) -> void {
    for (std::uint64_t i = 0; i < kEntriesPerNode; ++i) {
      const std::uint64_t addr = node + 8 * i;
      if (!mem_.contains(addr, 8))
        return;
      const std::uint64_t e = mem_.read_u64(addr);
      if (!pte::valid(e))
        continue;
      const std::uint64_t va = prefix | (i << (kPageShift + 9 * level));
      if (pte::leaf(e)) {
        if (level == 0)
          out.push_back(Mapping{va, pte::address(e), pte::perms(e)});
      } else if (level > 0) {
        self(self, pte::address(e), level - 1, va);
      }
    }
  };
  walk(walk, root_, kLevels - 1, 0);
  return out;
}

std::string StageTwoPageTable::dump() const
{
  std::string out;
  char line[96];
  for (const auto& m : mappings()) {
    std::snprintf(line, sizeof line, "0x%010llx -> 0x%010llx %s\n",
                  static_cast<unsigned long long>(m.gpa), static_cast<unsigned long long>(m.hpa),
                  perms_string(m.perms).c_str());
    out += line;
  }
  return out;
}

void StageTwoPageTable::set_raw_entry(std::uint64_t gpa, int level, std::uint64_t entry)
{
  if (level < 0 || level >= kLevels)
    throw ConfigError("set_raw_entry level out of range");
  mem_.write_u64(entry_address(gpa, level), entry);
}

bool StageOnePageTable::map(std::uint64_t gva, std::uint64_t gpa, std::uint8_t perms,
                            const GpaReader& read, const GpaWriter& write,
                            std::uint64_t& pool_next, std::uint64_t pool_end) const
{
  std::uint64_t node = root;
  for (int l = kLevels - 1; l > 0; --l) {
    const std::uint64_t addr = node + 8ull * level_index(gva, l);
    auto e = read(addr);
    if (!e)
      return false;
    if (!pte::valid(*e)) {
      if (pool_next + kPageSize > pool_end)
        return false;
      const std::uint64_t candidate = pool_next;
      // Touch the candidate first so a stage-2 miss surfaces before linking.
      if (!read(candidate))
        return false;
      if (!write(addr, pte::make_table(candidate)))
        return false;
      pool_next += kPageSize;
      node = candidate;
    } else {
      node = pte::address(*e);
    }
  }
  return write(node + 8ull * level_index(gva, 0), pte::make_leaf(gpa, perms));
}

} // namespace duvisor::mmu
