#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "duvisor/hw/machine.hpp"
#include "duvisor/mmu/phys_mem.hpp"
#include "duvisor/sim/trace.hpp"

namespace duvisor::cp {

using Pid = std::uint16_t;
using Tid = std::uint32_t;

struct RegionGrant
{
  std::uint64_t hva_base = 0;
  std::uint64_t hpa_base = 0;
  std::uint64_t size = 0;
  bool pinned = true;
  std::size_t pmc_slot = 0;

  bool operator==(const RegionGrant&) const = default;
};

struct ProcessRecord
{
  Pid pid = 0;
  bool dv_enabled = false;
  hw::Word vmid = 0;
  hw::Word deleg = 0;
  std::vector<RegionGrant> grants;
  bool alive = true;
  std::uint64_t s2_root = 0;
  std::vector<Tid> threads;
  /// Bank programmed on every core the process runs on.
  mmu::PmcBank pmc;
  std::string exit_reason;
};

/// Kernel-side state of one schedulable thread of a DV process. While the
/// thread is resident its registers live on the core and this copy is stale.
struct ThreadContext
{
  Tid tid = 0;
  Pid pid = 0;
  hw::CoreId core = 0;
  hw::DvSnapshot dv;
  hw::Mode mode = hw::Mode::HU;
  hw::Word pc = 0;
  hw::Word vip = 0;
  bool alive = true;
};

struct AuditRecord
{
  std::uint64_t cycle = 0;
  std::string op;
  Pid pid = 0;
  hw::CoreId core = 0;
  std::uint64_t arg0 = 0;
  std::uint64_t arg1 = 0;
  std::string result;
};

struct CpConfig
{
  std::uint64_t host_reserved = 64ull << 20;
  hw::Word vmid_limit = 0xffff;
  std::uint64_t hva_base = 0x7f00'0000'0000ull;
};

/// The host kernel's control plane for DV-Ext processes.
class CpDriver
{
public:
  /// Called when resuming a thread in V raises a trap (a latched UIPI).
  using GuestTrapHook = std::function<void(hw::CoreId, const hw::TrapEvent&)>;

  CpDriver(hw::Machine& machine, mmu::PhysicalMemory& mem, sim::Trace& trace, CpConfig cfg = {});

  void set_clock(const std::uint64_t* cycle) { clock_ = cycle; }
  void set_guest_trap_hook(GuestTrapHook hook) { guest_trap_hook_ = std::move(hook); }

  Pid spawn();

  /// Turns DV-Ext on for `pid` and returns its fresh VMID. The timer bit of
  /// the mask is dropped.
  hw::Word ioctl_enable_dv(Pid pid, hw::Word deleg_mask);
  /// Reserves, pins and zeroes a contiguous range, then opens it to V-mode
  /// accesses through one PMC slot on every core of the process.
  RegionGrant ioctl_alloc_region(Pid pid, std::uint64_t size, hw::CoreId caller = 0);
  /// Installs the stage-2 root on every core of the process.
  void ioctl_set_s2pt_root(Pid pid, std::uint64_t root);

  /// Creates a thread pinned to `core`. It starts in HU at `entry_pc`; an idle
  /// core picks it up at once, otherwise it waits for a timer tick.
  Tid create_thread(Pid pid, hw::CoreId core, hw::Word entry_pc);

  /// Timer trap in HS. `interrupted` is the mode the core was in before the
  /// trap. Round-robin among the core's threads.
  void on_timer(hw::CoreId core, hw::Mode interrupted);
  /// PMC violation in HS: the process on the core dies.
  void on_pmc_fault(hw::CoreId core, std::uint64_t hpa);
  /// HUSUIPI found no target. A target that belongs to the sender's own
  /// process but is descheduled gets the UIPI latched in its saved context,
  /// and the sender resumes in HU. Returns false when the operand is bogus;
  /// the sender is then left in HS for the caller to deal with.
  bool on_uipi_fault(hw::CoreId sender, hw::Word target_vcpuid);
  /// Any other trap the kernel has no handler for: the process dies.
  void on_illegal(hw::CoreId core, const hw::TrapEvent& trap);

  void kill(Pid pid, const std::string& why);

  std::optional<Tid> resident(hw::CoreId core) const;
  const ProcessRecord& process(Pid pid) const;
  bool alive(Pid pid) const;
  const ThreadContext& thread(Tid tid) const;
  std::size_t queued(hw::CoreId core) const { return runq_.at(core).size(); }
  const std::vector<AuditRecord>& audit() const { return audit_; }

  /// Alive grants are pairwise disjoint and clear of the host's own range.
  bool grants_disjoint() const;
  std::optional<Pid> grant_owner(std::uint64_t hpa, std::uint64_t len = 1) const;

private:
  ProcessRecord& proc(Pid pid);
  std::uint64_t now() const { return clock_ ? *clock_ : 0; }
  void record(const std::string& op, Pid pid, hw::CoreId core, std::uint64_t a0, std::uint64_t a1,
              const std::string& result);
  void control(sim::Handler what, Pid pid, hw::CoreId core, std::uint64_t info);
  std::optional<std::uint64_t> first_fit(std::uint64_t size) const;
  /// Runs `fn` with the core temporarily in HS, as an IPI to the kernel would.
  template <typename Fn>
  void in_hs(hw::CoreId core, Fn&& fn);
  void install(hw::CoreId core, Tid tid);
  void save_resident(hw::CoreId core, hw::Mode mode, hw::Word pc);
  void make_idle(hw::CoreId core);
  void check_invariants() const;

  hw::Machine& machine_;
  mmu::PhysicalMemory& mem_;
  sim::Trace& trace_;
  CpConfig cfg_;
  const std::uint64_t* clock_ = nullptr;
  GuestTrapHook guest_trap_hook_;

  std::vector<ProcessRecord> procs_;  // index = pid - 1
  std::vector<ThreadContext> threads_;
  std::vector<std::optional<Tid>> resident_;
  std::vector<std::deque<Tid>> runq_;
  hw::Word next_vmid_ = 1;
  std::uint64_t next_hva_;
  std::vector<AuditRecord> audit_;
};

} // namespace duvisor::cp
