#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "duvisor/hw/types.hpp"
#include "duvisor/mmu/pmc.hpp"

namespace duvisor::hw {

/// Per-core DV-Ext register file. All fields are 64-bit words.
struct DvRegisterFile
{
  Word hu_er = 0;
  Word hu_einfo = 0;
  /// Bitmask of virtual interrupt lines staged for injection at HURET.
  Word hu_vitr = 0;
  Word hu_vpc = 0;
  Word hu_ehb = 0;
  /// Resets to all-ones so an uninitialised core never matches vCPU 0.
  Word hu_vcpuid = ~Word{0};
  Word h_enable = 0;
  Word h_deleg = 0;
  Word h_vmid = 0;

  Word get(Reg r) const;
  void set(Reg r, Word v);

  bool operator==(const DvRegisterFile&) const = default;
};

/// What the kernel saves and restores on a context switch: the DV register
/// file, the PMC bank, the pending-UIPI latch and the owning process tag.
struct DvSnapshot
{
  DvRegisterFile regs;
  mmu::PmcBank pmc;
  std::optional<Word> latched_uipi;
  std::uint32_t owner = 0;

  bool operator==(const DvSnapshot&) const = default;
};

struct CoreState
{
  CoreId id = 0;
  Mode mode = Mode::HS;
  Word pc = 0;
  DvRegisterFile regs;
  mmu::PmcBank pmc;
  /// Sender VCPUID of a UIPI that arrived while the core was not in V.
  std::optional<Word> latched_uipi;
  /// Process tag of the context loaded on the core (0 = host kernel).
  std::uint32_t owner = 0;
  /// Stage-2 root; HS-only control register, never visible to HU.
  Word s2_root = 0;
  /// Guest-visible pending virtual interrupt lines.
  Word vip = 0;
  /// Guest PC saved when a trap lands in HS.
  Word hs_epc = 0;
};

enum class CsrOp : std::uint8_t { Read, Write };

using CsrResult = std::variant<Word, TrapEvent>;

struct UipiResult
{
  enum class Outcome : std::uint8_t { Delivered, Latched, Faulted };
  Outcome outcome = Outcome::Faulted;
  std::optional<CoreId> target;
  /// The VM exit raised on the target, or the fault raised on the sender.
  std::optional<TrapEvent> trap;
};

enum class RestoreStatus : std::uint8_t { Ok, NotInHs, VmidConflict };

/// One row of the register access-control table.
struct AccessRule
{
  Reg reg;
  Mode mode;
  bool enabled;  // h_enable
  bool read_legal;
  bool write_legal;
};

/// Legal accesses as listed by the DV-Ext register table: `hu_` registers
/// from HU (with h_enable) or HS, `h_` registers from HS only, nothing from V.
std::vector<AccessRule> access_table();
std::string access_table_csv();

/// Address of the host kernel's trap vector; HS-routed traps land here.
inline constexpr Word kHsTrapVector = 0xffff'ffff'8000'0000ull;

/// The simulated DV-Ext cores.
class Machine
{
public:
  explicit Machine(std::size_t cores);

  std::size_t core_count() const { return cores_.size(); }
  CoreState& core(CoreId id) { return cores_.at(id); }
  const CoreState& core(CoreId id) const { return cores_.at(id); }

  /// Reads or writes a DV register from the core's current mode. Illegal
  /// accesses trap to HS with ILLEGAL_HU_ACCESS (info = register index).
  CsrResult csr_access(CoreId id, Reg reg, CsrOp op, std::optional<Word> value = std::nullopt);

  /// Takes a trap on `id` and routes it by the delegation rules.
  TrapEvent route_trap(CoreId id, ExitReason reason, Word info);

  /// Resumes the guest at hu_vpc, moving hu_vitr into the guest's pending
  /// lines. Returns a trap when HURET is illegal here or when a latched UIPI
  /// fires on entry.
  std::optional<TrapEvent> exec_huret(CoreId id);

  /// Sends a UIPI to the core running `target_vcpuid` of the sender's VM.
  UipiResult exec_husuipi(CoreId sender, Word target_vcpuid);

  /// Kernel-only return to a guest interrupted by an HS trap.
  /// A latched UIPI fires on entry, as with HURET.
  std::optional<TrapEvent> resume_guest_from_hs(CoreId id, Word pc);

  /// HS-only context switch support. `save` returns the snapshot;
  /// `restore` installs one.
  std::optional<DvSnapshot> save_dv(CoreId id) const;
  RestoreStatus restore_dv(CoreId id, const DvSnapshot& snap);

  /// Installs a PMC slot. Must be issued from HS; otherwise the core traps.
  /// Throws ConfigError for a bad index or unaligned range.
  std::optional<TrapEvent> pmc_program(CoreId id, std::size_t index, const mmu::PmcRegion& region);

private:
  bool legal(const CoreState& c, Reg reg) const;
  TrapEvent illegal(CoreId id, Word info);

  std::vector<CoreState> cores_;
};

} // namespace duvisor::hw
