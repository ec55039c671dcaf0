#include "duvisor/mmu/pmc.hpp"

namespace duvisor::mmu {

std::optional<std::size_t> PmcBank::first_free() const
{
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (!slots[i].valid)
      return i;
  return std::nullopt;
}

std::size_t PmcBank::valid_count() const
{
  std::size_t n = 0;
  for (const auto& s : slots)
    n += s.valid ? 1 : 0;
  return n;
}

bool pmc_check(const PmcBank& bank, std::uint64_t hpa, std::uint64_t len, bool v_derived,
               Access access)
{
  if (!v_derived)
    return true;
  if (len == 0 || hpa + len < hpa)
    return false;
  const std::uint8_t need = perm_for(access);
  for (const auto& r : bank.slots) {
    if (!r.valid || !r.v_bit)
      continue;
    // [hpa, hpa+len) within [base, base+size)
    if (hpa >= r.base && hpa - r.base <= r.size && len <= r.size - (hpa - r.base) &&
        (r.perms & need) == need)
      return true;
  }
  return false;
}

} // namespace duvisor::mmu
