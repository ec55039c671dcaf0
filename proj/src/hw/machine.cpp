#include "duvisor/hw/machine.hpp"

#include <array>
#include <sstream>

namespace duvisor::hw {

namespace {

// Info words carried by ILLEGAL_HU_ACCESS for instruction faults; register
// faults carry the register index instead.
constexpr Word kIllegalHuret = 0x100;
constexpr Word kIllegalHusuipi = 0x101;
constexpr Word kIllegalPmcProgram = 0x102;

struct RegisterClass
{
  Reg reg;
  Mode min_mode;  // HU: "hu" data-plane register, HS: control-plane register
};

// Mode column of the DV-Ext register table.
constexpr std::array<RegisterClass, kRegCount> kRegisterTable = {{
  {Reg::HuEr, Mode::HU},
  {Reg::HuEinfo, Mode::HU},
  {Reg::HuVitr, Mode::HU},
  {Reg::HuVpc, Mode::HU},
  {Reg::HuEhb, Mode::HU},
  {Reg::HuVcpuid, Mode::HU},
  {Reg::HEnable, Mode::HS},
  {Reg::HDeleg, Mode::HS},
  {Reg::HVmid, Mode::HS},
}};

} // namespace

Word DvRegisterFile::get(Reg r) const
{
  switch (r) {
    case Reg::HuEr: return hu_er;
    case Reg::HuEinfo: return hu_einfo;
    case Reg::HuVitr: return hu_vitr;
    case Reg::HuVpc: return hu_vpc;
    case Reg::HuEhb: return hu_ehb;
    case Reg::HuVcpuid: return hu_vcpuid;
    case Reg::HEnable: return h_enable;
    case Reg::HDeleg: return h_deleg;
    case Reg::HVmid: return h_vmid;
  }
  return 0;
}

void DvRegisterFile::set(Reg r, Word v)
{
  switch (r) {
    case Reg::HuEr: hu_er = v; break;
    case Reg::HuEinfo: hu_einfo = v; break;
    case Reg::HuVitr: hu_vitr = v; break;
    case Reg::HuVpc: hu_vpc = v; break;
    case Reg::HuEhb: hu_ehb = v; break;
    case Reg::HuVcpuid: hu_vcpuid = v; break;
    case Reg::HEnable: h_enable = v & 1; break;
    // WARL: only defined reasons, and the timer bit is hardwired to zero.
    case Reg::HDeleg: h_deleg = v & kDelegValidMask & ~deleg_bit(ExitReason::Timer); break;
    case Reg::HVmid: h_vmid = v; break;
  }
}

std::vector<AccessRule> access_table()
{
  std::vector<AccessRule> rows;
  for (const auto& entry : kRegisterTable) {
    for (Mode mode : {Mode::HS, Mode::HU, Mode::V}) {
      for (bool enabled : {false, true}) {
        bool ok = false;
        if (mode == Mode::HS)
          ok = true;
        else if (mode == Mode::HU)
          ok = entry.min_mode == Mode::HU && enabled;
        rows.push_back(AccessRule{entry.reg, mode, enabled, ok, ok});
      }
    }
  }
  return rows;
}

std::string access_table_csv()
{
  std::ostringstream os;
  os << "register,mode,h_enable,read,write\n";
  for (const auto& r : access_table()) {
    os << to_string(r.reg) << ',' << to_string(r.mode) << ',' << (r.enabled ? 1 : 0) << ','
       << (r.read_legal ? "legal" : "trap") << ',' << (r.write_legal ? "legal" : "trap") << '\n';
  }
  return os.str();
}

Machine::Machine(std::size_t cores)
{
  if (cores == 0)
    throw ConfigError("machine needs at least one core");
  cores_.resize(cores);
  for (std::size_t i = 0; i < cores; ++i)
    cores_[i].id = static_cast<CoreId>(i);
}

bool Machine::legal(const CoreState& c, Reg reg) const
{
  switch (c.mode) {
    case Mode::HS: return true;
    case Mode::HU: return !is_hs_only(reg) && c.regs.h_enable != 0;
    case Mode::V: return false;
  }
  return false;
}

TrapEvent Machine::illegal(CoreId id, Word info)
{
  return route_trap(id, ExitReason::IllegalHuAccess, info);
}

CsrResult Machine::csr_access(CoreId id, Reg reg, CsrOp op, std::optional<Word> value)
{
  auto& c = core(id);
  if (!legal(c, reg))
    return illegal(id, static_cast<Word>(reg));
  const Word old = c.regs.get(reg);
  if (op == CsrOp::Write)
    c.regs.set(reg, value.value_or(0));
  return old;
}

TrapEvent Machine::route_trap(CoreId id, ExitReason reason, Word info)
{
  auto& c = core(id);
  // Traps taken outside V never go to HU: no nested HU handlers.
  const bool to_hu = c.mode == Mode::V && is_delegatable(reason) && c.regs.h_enable != 0 &&
                     (c.regs.h_deleg & deleg_bit(reason)) != 0 && c.regs.hu_ehb != 0;
  if (to_hu) {
    c.regs.hu_er = static_cast<Word>(reason);
    c.regs.hu_einfo = info;
    c.regs.hu_vpc = c.pc;
    c.mode = Mode::HU;
    c.pc = c.regs.hu_ehb;
    return TrapEvent{id, reason, info, Destination::HuHandler};
  }
  c.hs_epc = c.pc;
  c.mode = Mode::HS;
  c.pc = kHsTrapVector;
  return TrapEvent{id, reason, info, Destination::HsHandler};
}

std::optional<TrapEvent> Machine::exec_huret(CoreId id)
{
  auto& c = core(id);
  if (c.mode == Mode::V || (c.mode == Mode::HU && c.regs.h_enable == 0))
    return illegal(id, kIllegalHuret);
  c.mode = Mode::V;
  c.pc = c.regs.hu_vpc;
  if (c.regs.hu_vitr != 0) {
    c.vip |= c.regs.hu_vitr;
    c.regs.hu_vitr = 0;
  }
  if (c.latched_uipi) {
    const Word sender = *c.latched_uipi;
    c.latched_uipi.reset();
    return route_trap(id, ExitReason::Uipi, sender);
  }
  return std::nullopt;
}

std::optional<TrapEvent> Machine::resume_guest_from_hs(CoreId id, Word pc)
{
  auto& c = core(id);
  c.mode = Mode::V;
  c.pc = pc;
  if (c.latched_uipi) {
    const Word sender = *c.latched_uipi;
    c.latched_uipi.reset();
    return route_trap(id, ExitReason::Uipi, sender);
  }
  return std::nullopt;
}

UipiResult Machine::exec_husuipi(CoreId sender, Word target_vcpuid)
{
  auto& s = core(sender);
  if (s.mode == Mode::V || (s.mode == Mode::HU && s.regs.h_enable == 0))
    return UipiResult{UipiResult::Outcome::Faulted, std::nullopt, illegal(sender, kIllegalHusuipi)};

  for (auto& c : cores_) {
    if (c.regs.h_enable == 0 || c.regs.h_vmid != s.regs.h_vmid ||
        c.regs.hu_vcpuid != target_vcpuid)
      continue;
    if (c.mode == Mode::V) {
      auto trap = route_trap(c.id, ExitReason::Uipi, s.regs.hu_vcpuid);
      return UipiResult{UipiResult::Outcome::Delivered, c.id, trap};
    }
    c.latched_uipi = s.regs.hu_vcpuid;
    return UipiResult{UipiResult::Outcome::Latched, c.id, std::nullopt};
  }
  return UipiResult{UipiResult::Outcome::Faulted, std::nullopt,
                    route_trap(sender, ExitReason::IllegalHuAccess, target_vcpuid)};
}

std::optional<DvSnapshot> Machine::save_dv(CoreId id) const
{
  const auto& c = core(id);
  if (c.mode != Mode::HS)
    return std::nullopt;
  return DvSnapshot{c.regs, c.pmc, c.latched_uipi, c.owner};
}

RestoreStatus Machine::restore_dv(CoreId id, const DvSnapshot& snap)
{
  auto& c = core(id);
  if (c.mode != Mode::HS)
    return RestoreStatus::NotInHs;
  if (snap.regs.h_enable != 0 && snap.regs.h_vmid != 0) {
    for (const auto& o : cores_) {
      if (o.id == id || o.regs.h_enable == 0)
        continue;
      if (o.regs.h_vmid == snap.regs.h_vmid && o.owner != snap.owner)
        return RestoreStatus::VmidConflict;
    }
  }
  c.regs = snap.regs;
  c.pmc = snap.pmc;
  c.latched_uipi = snap.latched_uipi;
  c.owner = snap.owner;
  return RestoreStatus::Ok;
}

std::optional<TrapEvent> Machine::pmc_program(CoreId id, std::size_t index,
                                              const mmu::PmcRegion& region)
{
  if (index >= mmu::kPmcSlots)
    throw ConfigError("PMC slot index out of range (64 slots per core)");
  if (region.valid &&
      (!mmu::page_aligned(region.base) || !mmu::page_aligned(region.size) || region.size == 0))
    throw ConfigError("PMC region must have a page-aligned base and a non-zero page-multiple size");
  auto& c = core(id);
  if (c.mode != Mode::HS)
    return illegal(id, kIllegalPmcProgram);
  c.pmc.slots[index] = region;
  return std::nullopt;
}

} // namespace duvisor::hw
