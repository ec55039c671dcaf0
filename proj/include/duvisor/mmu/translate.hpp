#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <variant>

#include "duvisor/hw/types.hpp"
#include "duvisor/mmu/page_table.hpp"
#include "duvisor/mmu/phys_mem.hpp"
#include "duvisor/mmu/pmc.hpp"

namespace duvisor::mmu {

enum class FaultKind : std::uint8_t { S1PageFault, S2PageFault, PmcViolation };

std::string_view to_string(FaultKind k);

/// `addr` is the GVA for stage-1 faults, the faulting GPA for stage-2 faults
/// (which may be a stage-1 node address) and the offending HPA for PMC.
struct Fault
{
  FaultKind kind = FaultKind::S2PageFault;
  std::uint64_t addr = 0;

  bool operator==(const Fault&) const = default;
};

struct Translation
{
  std::uint64_t hpa = 0;
  std::uint64_t gpa = 0;

  bool operator==(const Translation&) const = default;
};

using TranslateResult = std::variant<Translation, Fault>;

/// Exit reason a stage-2 fault raises for the access that caused it.
hw::ExitReason s2pf_reason(Access access);

/// Everything one walk needs: the PMC bank of the issuing core, host RAM
/// and an optional hook that sees every PMC decision.
struct WalkContext
{
  const PmcBank& pmc;
  PhysicalMemory& mem;
  std::function<void(std::uint64_t hpa, std::uint64_t len, bool ok)> on_pmc_check{};
};

/// Stage-2 walk from `s2_root`. Every node fetch and the final leaf range
/// [hpa, hpa+len) are PMC-checked as V-derived accesses. `len` must not cross
/// a page boundary.
TranslateResult translate_gpa(const WalkContext& ctx, std::uint64_t s2_root, std::uint64_t gpa,
                              Access access, std::uint64_t len = 1);

/// Two-stage walk. Stage-1 node fetches are guest-physical reads and go
/// through translate_gpa. With no stage-1 root the GVA is used as the GPA.
TranslateResult translate(const WalkContext& ctx, std::optional<std::uint64_t> s1_root,
                          std::uint64_t s2_root, std::uint64_t gva, Access access,
                          std::uint64_t len = 1);

} // namespace duvisor::mmu
