#include "duvisor/mmu/translate.hpp"

namespace duvisor::mmu {

std::string_view to_string(FaultKind k)
{
  switch (k) {
    case FaultKind::S1PageFault: return "S1_PAGE_FAULT";
    case FaultKind::S2PageFault: return "S2_PAGE_FAULT";
    case FaultKind::PmcViolation: return "PMC_VIOLATION";
  }
  return "?";
}

hw::ExitReason s2pf_reason(Access access)
{
  switch (access) {
    case Access::Read: return hw::ExitReason::S2pfLoad;
    case Access::Write: return hw::ExitReason::S2pfStore;
    case Access::Execute: return hw::ExitReason::S2pfFetch;
  }
  return hw::ExitReason::S2pfLoad;
}

namespace {

bool checked(const WalkContext& ctx, std::uint64_t hpa, std::uint64_t len, Access access)
{
  const bool ok = pmc_check(ctx.pmc, hpa, len, true, access) && ctx.mem.contains(hpa, len);
  if (ctx.on_pmc_check)
    ctx.on_pmc_check(hpa, len, ok);
  return ok;
}

} // namespace

TranslateResult translate_gpa(const WalkContext& ctx, std::uint64_t s2_root, std::uint64_t gpa,
                              Access access, std::uint64_t len)
{
  if (gpa >= kAddrLimit)
    return Fault{FaultKind::S2PageFault, gpa};
  std::uint64_t node = s2_root;
  for (int level = kLevels - 1; level >= 0; --level) {
    const std::uint64_t entry_addr = node + 8ull * level_index(gpa, level);
    if (!checked(ctx, entry_addr, 8, Access::Read))
      return Fault{FaultKind::PmcViolation, entry_addr};
    const std::uint64_t e = ctx.mem.read_u64(entry_addr, Origin::Guest);
    if (!pte::valid(e))
      return Fault{FaultKind::S2PageFault, gpa};
    if (!pte::leaf(e)) {
      node = pte::address(e);
      continue;
    }
    // No superpages: a leaf above the last level is malformed.
    if (level != 0 || (pte::perms(e) & perm_for(access)) == 0)
      return Fault{FaultKind::S2PageFault, gpa};
    const std::uint64_t hpa = pte::address(e) | (gpa & (kPageSize - 1));
    if (!checked(ctx, hpa, len, access))
      return Fault{FaultKind::PmcViolation, hpa};
    return Translation{hpa, gpa};
  }
  return Fault{FaultKind::S2PageFault, gpa};
}

TranslateResult translate(const WalkContext& ctx, std::optional<std::uint64_t> s1_root,
                          std::uint64_t s2_root, std::uint64_t gva, Access access,
                          std::uint64_t len)
{
  if (!s1_root)
    return translate_gpa(ctx, s2_root, gva, access, len);
  if (gva >= kAddrLimit)
    return Fault{FaultKind::S1PageFault, gva};
  std::uint64_t node = *s1_root;
  for (int level = kLevels - 1; level >= 0; --level) {
    const std::uint64_t entry_gpa = node + 8ull * level_index(gva, level);
    auto fetched = translate_gpa(ctx, s2_root, entry_gpa, Access::Read, 8);
    if (auto* f = std::get_if<Fault>(&fetched))
      return *f;
    const std::uint64_t e =
        ctx.mem.read_u64(std::get<Translation>(fetched).hpa, Origin::Guest);
    if (!pte::valid(e))
      return Fault{FaultKind::S1PageFault, gva};
    if (!pte::leaf(e)) {
      node = pte::address(e);
      continue;
    }
    if (level != 0 || (pte::perms(e) & perm_for(access)) == 0)
      return Fault{FaultKind::S1PageFault, gva};
    const std::uint64_t gpa = pte::address(e) | (gva & (kPageSize - 1));
    return translate_gpa(ctx, s2_root, gpa, access, len);
  }
  return Fault{FaultKind::S1PageFault, gva};
}

} // namespace duvisor::mmu
