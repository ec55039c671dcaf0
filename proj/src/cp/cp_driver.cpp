#include "duvisor/cp/cp_driver.hpp"

#include <algorithm>
#include <stdexcept>

namespace duvisor::cp {

using hw::CoreId;
using hw::Mode;
using hw::Word;

CpDriver::CpDriver(hw::Machine& machine, mmu::PhysicalMemory& mem, sim::Trace& trace, CpConfig cfg)
  : machine_(machine), mem_(mem), trace_(trace), cfg_(cfg), next_hva_(cfg.hva_base)
{
  if (!mmu::page_aligned(cfg_.host_reserved) || cfg_.host_reserved > mem_.size())
    throw ConfigError("host reserved range must be page-aligned and fit in host RAM");
  resident_.resize(machine_.core_count());
  runq_.resize(machine_.core_count());
}

ProcessRecord& CpDriver::proc(Pid pid)
{
  if (pid == 0 || pid > procs_.size())
    throw ConfigError("no such process " + std::to_string(pid));
  return procs_[pid - 1];
}

const ProcessRecord& CpDriver::process(Pid pid) const
{
  return const_cast<CpDriver*>(this)->proc(pid);
}

bool CpDriver::alive(Pid pid) const
{
  return pid != 0 && pid <= procs_.size() && procs_[pid - 1].alive;
}

const ThreadContext& CpDriver::thread(Tid tid) const
{
  return threads_.at(tid);
}

std::optional<Tid> CpDriver::resident(CoreId core) const
{
  return resident_.at(core);
}

void CpDriver::record(const std::string& op, Pid pid, CoreId core, std::uint64_t a0, std::uint64_t a1,
                      const std::string& result)
{
  audit_.push_back(AuditRecord{now(), op, pid, core, a0, a1, result});
}

void CpDriver::control(sim::Handler what, Pid pid, CoreId core, std::uint64_t info)
{
  sim::TraceEvent e;
  e.cycle = now();
  e.kind = sim::EventKind::Control;
  e.mode = Mode::HS;
  e.handler = what;
  e.core = static_cast<std::uint16_t>(core);
  e.pid = pid;
  e.vmid = pid ? static_cast<std::uint16_t>(process(pid).vmid) : 0;
  e.info = info;
  trace_.emit(e);
}

Pid CpDriver::spawn()
{
  if (procs_.size() >= 0xffff)
    throw ConfigError("process table full");
  ProcessRecord p;
  p.pid = static_cast<Pid>(procs_.size() + 1);
  procs_.push_back(p);
  record("spawn", p.pid, 0, 0, 0, "ok");
  control(sim::Handler::CtlSpawn, p.pid, 0, 0);
  return p.pid;
}

template <typename Fn>
void CpDriver::in_hs(CoreId core, Fn&& fn)
{
  auto& c = machine_.core(core);
  const Mode mode = c.mode;
  const Word pc = c.pc;
  c.mode = Mode::HS;
  fn();
  c.mode = mode;
  c.pc = pc;
}

Word CpDriver::ioctl_enable_dv(Pid pid, Word deleg_mask)
{
  auto& p = proc(pid);
  if (!p.alive)
    throw ConfigError("enable_dv on a dead process");
  if (p.dv_enabled) {
    record("enable_dv", pid, 0, deleg_mask, 0, "error: already enabled");
    throw ConfigError("DV-Ext already enabled for process " + std::to_string(pid));
  }
  if (next_vmid_ > cfg_.vmid_limit) {
    record("enable_dv", pid, 0, deleg_mask, 0, "error: vmid space exhausted");
    throw ConfigError("VMID space exhausted");
  }
  hw::DvRegisterFile masked;
  masked.set(hw::Reg::HDeleg, deleg_mask);
  p.dv_enabled = true;
  p.vmid = next_vmid_++;
  p.deleg = masked.h_deleg;
  for (Tid t : p.threads) {
    auto& regs = threads_[t].dv.regs;
    regs.h_enable = 1;
    regs.h_deleg = p.deleg;
    regs.h_vmid = p.vmid;
    if (resident_[threads_[t].core] == t)
      machine_.core(threads_[t].core).regs = regs;
  }
  record("enable_dv", pid, 0, deleg_mask, p.vmid, "ok");
  control(sim::Handler::CtlEnableDv, pid, 0, p.vmid);
  return p.vmid;
}

std::optional<std::uint64_t> CpDriver::first_fit(std::uint64_t size) const
{
  std::vector<std::pair<std::uint64_t, std::uint64_t>> used;
  for (const auto& p : procs_)
    if (p.alive)
      for (const auto& g : p.grants)
        used.emplace_back(g.hpa_base, g.size);
  std::sort(used.begin(), used.end());
  std::uint64_t cursor = mem_.base() + cfg_.host_reserved;
  const std::uint64_t end = mem_.base() + mem_.size();
  for (const auto& [base, len] : used) {
    if (base >= cursor && base - cursor >= size)
      return cursor;
    cursor = std::max(cursor, base + len);
  }
  if (cursor <= end && end - cursor >= size)
    return cursor;
  return std::nullopt;
}

RegionGrant CpDriver::ioctl_alloc_region(Pid pid, std::uint64_t size, CoreId caller)
{
  auto& p = proc(pid);
  auto fail = [&](const std::string& why) -> RegionGrant {
    record("alloc_region", pid, caller, size, 0, "error: " + why);
    throw ConfigError("alloc_region: " + why);
  };
  if (!p.alive || !p.dv_enabled)
    return fail("process has no DV-Ext context");
  if (size == 0 || !mmu::page_aligned(size))
    return fail("size must be a non-zero page multiple");
  auto slot = p.pmc.first_free();
  if (!slot)
    return fail("no free PMC slot");
  auto base = first_fit(size);
  if (!base)
    return fail("insufficient contiguous host memory");

  mem_.zero_range(*base, size);
  RegionGrant g{next_hva_, *base, size, true, *slot};
  next_hva_ += size;
  p.grants.push_back(g);

  const mmu::PmcRegion region{*base, size, mmu::kPermRWX, true, true};
  p.pmc.slots[*slot] = region;
  for (Tid t : p.threads) {
    threads_[t].dv.pmc.slots[*slot] = region;
    const CoreId c = threads_[t].core;
    if (resident_[c] == t)
      in_hs(c, [&] { machine_.pmc_program(c, *slot, region); });
  }
  record("alloc_region", pid, caller, size, *base, "ok");
  control(sim::Handler::CtlAllocRegion, pid, caller, *base);
  check_invariants();
  return g;
}

void CpDriver::ioctl_set_s2pt_root(Pid pid, std::uint64_t root)
{
  auto& p = proc(pid);
  if (!p.alive || !p.dv_enabled)
    throw ConfigError("set_s2pt_root: process has no DV-Ext context");
  if (!mmu::page_aligned(root))
    throw ConfigError("set_s2pt_root: root must be page-aligned");
  p.s2_root = root;
  for (Tid t : p.threads)
    if (resident_[threads_[t].core] == t)
      machine_.core(threads_[t].core).s2_root = root;
  record("set_s2pt_root", pid, 0, root, 0, "ok");
  control(sim::Handler::CtlSetS2Root, pid, 0, root);
}

Tid CpDriver::create_thread(Pid pid, CoreId core, Word entry_pc)
{
  auto& p = proc(pid);
  if (!p.alive)
    throw ConfigError("create_thread on a dead process");
  if (core >= machine_.core_count())
    throw ConfigError("create_thread: no core " + std::to_string(core));
  ThreadContext t;
  t.tid = static_cast<Tid>(threads_.size());
  t.pid = pid;
  t.core = core;
  t.dv.owner = pid;
  t.dv.pmc = p.pmc;
  if (p.dv_enabled) {
    t.dv.regs.h_enable = 1;
    t.dv.regs.h_deleg = p.deleg;
    t.dv.regs.h_vmid = p.vmid;
  }
  t.mode = Mode::HU;
  t.pc = entry_pc;
  threads_.push_back(t);
  p.threads.push_back(t.tid);
  record("create_thread", pid, core, t.tid, entry_pc, "ok");
  if (!resident_[core]) {
    machine_.core(core).mode = Mode::HS;
    install(core, t.tid);
  } else {
    runq_[core].push_back(t.tid);
  }
  return t.tid;
}

void CpDriver::install(CoreId core, Tid tid)
{
  auto& t = threads_[tid];
  auto& c = machine_.core(core);
  const auto status = machine_.restore_dv(core, t.dv);
  if (status != hw::RestoreStatus::Ok)
    throw std::logic_error("context restore refused on core " + std::to_string(core));
  // The latch now lives on the core; the saved copy must not fire twice.
  t.dv.latched_uipi.reset();
  c.vip = t.vip;
  c.s2_root = process(t.pid).s2_root;
  resident_[core] = tid;
  control(sim::Handler::CtlDispatch, t.pid, core, tid);
  if (t.mode == Mode::V) {
    sim::TraceEvent e;
    e.cycle = now();
    e.kind = sim::EventKind::VmEntry;
    e.handler = sim::Handler::EntryHs;
    e.mode = Mode::HS;
    e.core = static_cast<std::uint16_t>(core);
    e.pid = t.pid;
    e.vmid = static_cast<std::uint16_t>(c.regs.h_vmid);
    e.vcpuid = static_cast<std::uint16_t>(c.regs.hu_vcpuid);
    trace_.emit(e);
    if (auto trap = machine_.resume_guest_from_hs(core, t.pc); trap && guest_trap_hook_)
      guest_trap_hook_(core, *trap);
  } else {
    c.mode = t.mode;
    c.pc = t.pc;
  }
}

void CpDriver::save_resident(CoreId core, Mode mode, Word pc)
{
  const Tid tid = *resident_[core];
  auto snap = machine_.save_dv(core);
  if (!snap)
    throw std::logic_error("context save outside HS");
  auto& t = threads_[tid];
  t.dv = *snap;
  t.mode = mode;
  t.pc = pc;
  t.vip = machine_.core(core).vip;
  resident_[core].reset();
}

void CpDriver::make_idle(CoreId core)
{
  auto& c = machine_.core(core);
  c.mode = Mode::HS;
  machine_.restore_dv(core, hw::DvSnapshot{});
  c.vip = 0;
  c.s2_root = 0;
  c.pc = hw::kHsTrapVector;
  resident_[core].reset();
}

void CpDriver::on_timer(CoreId core, Mode interrupted)
{
  auto& c = machine_.core(core);
  const Pid pid = resident_[core] ? threads_[*resident_[core]].pid : 0;
  control(sim::Handler::CtlTimer, pid, core, 0);
  auto& q = runq_[core];
  if (!resident_[core]) {
    if (!q.empty()) {
      const Tid next = q.front();
      q.pop_front();
      install(core, next);
    }
    record("timer", 0, core, 0, 0, "idle");
    return;
  }
  if (q.empty()) {
    // Nothing else to run: hand the core straight back.
    const Tid cur = *resident_[core];
    threads_[cur].mode = interrupted;
    threads_[cur].pc = c.hs_epc;
    resident_[core].reset();
    auto snap = machine_.save_dv(core);
    threads_[cur].dv = *snap;
    threads_[cur].vip = c.vip;
    install(core, cur);
    record("timer", pid, core, cur, cur, "resume");
    return;
  }
  const Tid cur = *resident_[core];
  save_resident(core, interrupted, c.hs_epc);
  q.push_back(cur);
  const Tid next = q.front();
  q.pop_front();
  install(core, next);
  record("timer", pid, core, cur, next, "switch");
}

void CpDriver::on_pmc_fault(CoreId core, std::uint64_t hpa)
{
  if (!resident_[core])
    throw std::logic_error("PMC fault on a core with no DV context");
  const Pid pid = threads_[*resident_[core]].pid;
  control(sim::Handler::CtlPmcFault, pid, core, hpa);
  record("pmc_fault", pid, core, hpa, 0, "kill");
  kill(pid, "PMC violation");
}

bool CpDriver::on_uipi_fault(CoreId sender, Word target_vcpuid)
{
  if (!resident_[sender])
    throw std::logic_error("UIPI fault on a core with no DV context");
  auto& c = machine_.core(sender);
  const Pid pid = threads_[*resident_[sender]].pid;
  control(sim::Handler::CtlUipiFault, pid, sender, target_vcpuid);
  for (Tid t : proc(pid).threads) {
    auto& th = threads_[t];
    if (!th.alive || resident_[th.core] == t || th.dv.regs.hu_vcpuid != target_vcpuid)
      continue;
    th.dv.latched_uipi = c.regs.hu_vcpuid;
    c.mode = Mode::HU;
    c.pc = c.hs_epc;
    record("uipi_fault", pid, sender, target_vcpuid, t, "pended");
    return true;
  }
  record("uipi_fault", pid, sender, target_vcpuid, 0, "rejected");
  return false;
}

void CpDriver::on_illegal(CoreId core, const hw::TrapEvent& trap)
{
  if (!resident_[core])
    throw std::logic_error("illegal-access trap on a core with no DV context");
  const Pid pid = threads_[*resident_[core]].pid;
  control(sim::Handler::CtlIllegal, pid, core, trap.info);
  record("illegal", pid, core, static_cast<std::uint64_t>(trap.reason), trap.info, "kill");
  kill(pid, std::string("unhandled ") + std::string(hw::to_string(trap.reason)));
}

void CpDriver::kill(Pid pid, const std::string& why)
{
  auto& p = proc(pid);
  if (!p.alive)
    return;
  p.alive = false;
  p.exit_reason = why;

  sim::TraceEvent e;
  e.cycle = now();
  e.kind = sim::EventKind::Kill;
  e.mode = Mode::HS;
  e.pid = pid;
  e.vmid = static_cast<std::uint16_t>(p.vmid);
  trace_.emit(e);

  for (Tid t : p.threads) {
    auto& th = threads_[t];
    th.alive = false;
    auto& q = runq_[th.core];
    q.erase(std::remove(q.begin(), q.end(), t), q.end());
  }
  for (Tid t : p.threads) {
    const CoreId core = threads_[t].core;
    if (resident_[core] != t)
      continue;
    make_idle(core);
    if (!runq_[core].empty()) {
      const Tid next = runq_[core].front();
      runq_[core].pop_front();
      install(core, next);
    }
  }
  for (const auto& g : p.grants)
    mem_.zero_range(g.hpa_base, g.size);
  p.grants.clear();
  p.pmc = {};
  record("kill", pid, 0, p.vmid, 0, why);
  check_invariants();
}

bool CpDriver::grants_disjoint() const
{
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  for (const auto& p : procs_)
    if (p.alive)
      for (const auto& g : p.grants)
        ranges.emplace_back(g.hpa_base, g.hpa_base + g.size);
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    if (ranges[i].first < mem_.base() + cfg_.host_reserved)
      return false;
    if (i > 0 && ranges[i].first < ranges[i - 1].second)
      return false;
  }
  return true;
}

std::optional<Pid> CpDriver::grant_owner(std::uint64_t hpa, std::uint64_t len) const
{
  for (const auto& p : procs_) {
    if (!p.alive)
      continue;
    for (const auto& g : p.grants)
      if (hpa >= g.hpa_base && len <= g.size && hpa - g.hpa_base <= g.size - len)
        return p.pid;
  }
  return std::nullopt;
}

void CpDriver::check_invariants() const
{
  if (!grants_disjoint())
    throw std::logic_error("grant ranges overlap");
}

} // namespace duvisor::cp
