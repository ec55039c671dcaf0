#include "duvisor/hv/hypervisor.hpp"

#include <algorithm>
#include <bit>
#include <stdexcept>

#include "duvisor/guest/canned.hpp"

namespace duvisor::hv {

using hw::CoreId;
using hw::CsrOp;
using hw::ExitReason;
using hw::Mode;
using hw::Reg;
using hw::Word;
using mmu::kPageSize;
using sim::EventKind;
using sim::Handler;
using sim::kNoLink;

namespace {

constexpr std::uint64_t page_down(std::uint64_t a) { return a & ~(kPageSize - 1); }
constexpr std::uint64_t page_up(std::uint64_t a) { return (a + kPageSize - 1) & ~(kPageSize - 1); }

constexpr std::uint16_t kDeviceSender = 0xffff;

struct OutOfGrants
{};

bool is_s2pf(ExitReason r)
{
  return r == ExitReason::S2pfLoad || r == ExitReason::S2pfStore || r == ExitReason::S2pfFetch;
}

} // namespace

std::string_view to_string(VcpuStatus s)
{
  switch (s) {
    case VcpuStatus::Init: return "init";
    case VcpuStatus::InGuest: return "in-guest";
    case VcpuStatus::InHypervisor: return "in-hypervisor";
    case VcpuStatus::Blocked: return "blocked";
    case VcpuStatus::Halted: return "halted";
    case VcpuStatus::Aborted: return "aborted";
  }
  return "?";
}

std::optional<std::uint64_t> GpaAllocator::next_page()
{
  std::uint64_t skip = offset_;
  for (const auto& g : grants_) {
    if (skip < g.size) {
      offset_ += kPageSize;
      return g.hpa_base + skip;
    }
    skip -= g.size;
  }
  return std::nullopt;
}

std::uint64_t GpaAllocator::total() const
{
  std::uint64_t t = 0;
  for (const auto& g : grants_)
    t += g.size;
  return t;
}

// ---------------------------------------------------------------------------

/// The hypervisor thread dedicated to one vCPU. In V it steps the guest; in
/// HU it runs the exit handler, one phase per step.
class Vthread final : public sim::Actor, public guest::GuestPort
{
public:
  Vthread(Hypervisor& hv, std::uint32_t id) : hv_(hv), id_(id) {}

  bool step(CoreId core) override;
  bool done() const override { return phase_ == Phase::Halted || !hv_.alive(); }
  void on_guest_trap(CoreId core, const hw::TrapEvent& trap) override { take_exit(core, trap); }

  /// Records a VM exit the hardware has just taken on `core`.
  void take_exit(CoreId core, const hw::TrapEvent& trap);

  mmu::TranslateResult translate(std::optional<std::uint64_t> s1_root, std::uint64_t gva, mmu::Access access,
                                 std::uint64_t len) override
  {
    auto& k = hv_.k_;
    return mmu::translate(k.walk_context(core_), s1_root, k.machine().core(core_).s2_root, gva, access, len);
  }
  mmu::TranslateResult translate_gpa(std::uint64_t gpa, mmu::Access access, std::uint64_t len) override
  {
    auto& k = hv_.k_;
    return mmu::translate_gpa(k.walk_context(core_), k.machine().core(core_).s2_root, gpa, access, len);
  }
  pvio::GpaAccess& gpa_access() override { return *gpa_; }
  mmu::PhysicalMemory& memory() override { return hv_.k_.memory(); }
  Word& vip() override { return hv_.k_.machine().core(core_).vip; }
  void irq_acked(unsigned irq) override;
  const pvio::DeviceLayout* device(pvio::DeviceKind kind) const override { return hv_.device_layout(kind); }

private:
  enum class Phase : std::uint8_t { Init, Guest, Handle, Enter, Blocked, Halted };

  VcpuState& v() { return hv_.vcpus_[id_]; }
  std::optional<Word> csr(CoreId core, Reg r, CsrOp op, Word value = 0);
  bool advance_vpc(CoreId core);
  bool guest_step(CoreId core);
  bool init(CoreId core);
  bool handle(CoreId core);
  bool handle_hypercall(CoreId core);
  bool handle_s2pf(CoreId core, Word gpa);
  bool enter(CoreId core, std::uint32_t link);
  void dispatch(CoreId core, Handler h, Word info);
  void abort(CoreId core, const std::string& why);

  Hypervisor& hv_;
  std::uint32_t id_;
  Phase phase_ = Phase::Init;
  std::uint32_t exit_idx_ = kNoLink;
  CoreId core_ = 0;
  std::optional<pvio::GpaAccess> gpa_;
};

/// A device backend thread: RX polling, TX draining or block service.
class IoThread final : public sim::Actor
{
public:
  enum class Role : std::uint8_t { NetRx, NetTx, Blk };

  IoThread(Hypervisor& hv, Role role, std::uint32_t irq_vcpu) : hv_(hv), role_(role), irq_vcpu_(irq_vcpu) {}

  bool step(CoreId core) override;
  bool done() const override { return hv_.finished() || broken_; }
  std::optional<std::uint64_t> wake_at() const override
  {
    if (role_ == Role::NetRx && hv_.net_)
      return hv_.net_->next_arrival();
    return std::nullopt;
  }

private:
  bool on_fault(CoreId core, const mmu::Fault& f);

  Hypervisor& hv_;
  Role role_;
  std::uint32_t irq_vcpu_;
  bool started_ = false;
  bool broken_ = false;
};

// ---------------------------------------------------------------------------

std::optional<Word> Vthread::csr(CoreId core, Reg r, CsrOp op, Word value)
{
  auto res = hv_.k_.machine().csr_access(core, r, op, value);
  if (auto* trap = std::get_if<hw::TrapEvent>(&res)) {
    hv_.k_.cp().on_illegal(core, *trap);
    return std::nullopt;
  }
  return std::get<Word>(res);
}

bool Vthread::advance_vpc(CoreId core)
{
  auto pc = csr(core, Reg::HuVpc, CsrOp::Read);
  return pc && csr(core, Reg::HuVpc, CsrOp::Write, *pc + guest::kInstrBytes);
}

void Vthread::dispatch(CoreId core, Handler h, Word info)
{
  auto e = hv_.event(EventKind::Dispatch, core, Mode::HU);
  e.vcpuid = static_cast<std::uint16_t>(id_);
  e.handler = h;
  e.info = info;
  e.link = exit_idx_;
  e.reason = static_cast<std::uint8_t>(*csr(core, Reg::HuEr, CsrOp::Read));
  hv_.k_.emit(e);
}

void Vthread::abort(CoreId core, const std::string& why)
{
  auto& c = hv_.k_.machine().core(core);
  auto e = hv_.event(EventKind::GuestAbort, core, Mode::HU);
  e.vcpuid = static_cast<std::uint16_t>(id_);
  e.info = v().cpu.pc;
  e.link = exit_idx_;
  hv_.k_.emit(e);
  v().status = VcpuStatus::Aborted;
  v().abort_reason = why;
  phase_ = Phase::Halted;
  // A fatal guest fault lands in the exit handler, which gives up on the vCPU.
  if (c.mode == Mode::V) {
    c.mode = Mode::HU;
    c.pc = c.regs.hu_ehb;
  }
}

void Vthread::take_exit(CoreId core, const hw::TrapEvent& trap)
{
  auto& vc = v();
  ++vc.exits;
  auto e = hv_.event(EventKind::VmExit, core, Mode::V);
  e.vcpuid = static_cast<std::uint16_t>(id_);
  e.reason = static_cast<std::uint8_t>(trap.reason);
  e.info = trap.info;
  e.handler = trap.destination == hw::Destination::HuHandler ? Handler::ExitToHu : Handler::ExitToHs;
  const auto idx = hv_.k_.emit(e);
  if (trap.destination == hw::Destination::HuHandler) {
    vc.status = VcpuStatus::InHypervisor;
    phase_ = Phase::Handle;
    exit_idx_ = idx;
    return;
  }
  // The kernel has no handler for guest exits it was not meant to see.
  vc.status = VcpuStatus::InHypervisor;
  hv_.k_.cp().on_illegal(core, trap);
}

void Vthread::irq_acked(unsigned irq)
{
  auto& vc = v();
  auto e = hv_.event(EventKind::IrqAck, core_, Mode::V);
  e.vcpuid = static_cast<std::uint16_t>(id_);
  e.info = irq;
  e.origin = vc.delivered[irq].insert;
  hv_.k_.emit(e);
  if (vc.delivered[irq].insert != kNoLink)
    vc.ack_latency.push_back(hv_.k_.cycle() - vc.delivered[irq].cycle);
  vc.delivered[irq] = {};
}

bool Vthread::step(CoreId core)
{
  core_ = core;
  const Mode mode = hv_.k_.machine().core(core).mode;
  if (mode == Mode::V)
    return phase_ == Phase::Guest ? guest_step(core) : false;
  if (mode != Mode::HU)
    return false;
  switch (phase_) {
    case Phase::Init: return init(core);
    case Phase::Handle: return handle(core);
    case Phase::Enter: return enter(core, exit_idx_);
    case Phase::Blocked:
      if (v().state.empty())
        return false;
      return enter(core, exit_idx_);
    case Phase::Guest:
    case Phase::Halted: return false;
  }
  return false;
}

bool Vthread::init(CoreId core)
{
  auto& vc = v();
  const Word entry = hv_.program_.entry_pc(id_);
  if (!csr(core, Reg::HuEhb, CsrOp::Write, kExitHandlerPc) || !csr(core, Reg::HuVcpuid, CsrOp::Write, id_) ||
      !csr(core, Reg::HuVpc, CsrOp::Write, entry) || !csr(core, Reg::HuVitr, CsrOp::Write, 0))
    return true;
  vc.cpu.pc = entry;
  return enter(core, kNoLink);
}

bool Vthread::enter(CoreId core, std::uint32_t link)
{
  auto& vc = v();
  auto& c = hv_.k_.machine().core(core);
  // Last look at the state area: anything written up to here rides along.
  std::uint32_t origin = kNoLink;
  if (!vc.state.empty()) {
    const Word bits = vc.state.pending;
    auto staged = csr(core, Reg::HuVitr, CsrOp::Read);
    if (!staged || !csr(core, Reg::HuVitr, CsrOp::Write, *staged | bits))
      return true;
    for (Word rest = bits; rest; rest &= rest - 1) {
      const unsigned irq = static_cast<unsigned>(std::countr_zero(rest));
      const bool already = (c.vip >> irq) & 1;
      if (!already || vc.delivered[irq].insert == kNoLink) {
        vc.delivered[irq] = vc.state.tags[irq];
        origin = std::min(origin, vc.state.tags[irq].insert);
      }
      vc.state.tags[irq] = {};
    }
    vc.state.pending = 0;
  }
  vc.status = VcpuStatus::InGuest;
  phase_ = Phase::Guest;

  auto e = hv_.event(EventKind::VmEntry, core, Mode::HU);
  e.vcpuid = static_cast<std::uint16_t>(id_);
  e.handler = Handler::EntryHuret;
  e.link = link;
  e.origin = origin;
  hv_.k_.emit(e);

  if (auto trap = hv_.k_.machine().exec_huret(core)) {
    if (trap->reason == ExitReason::IllegalHuAccess) {
      vc.status = VcpuStatus::InHypervisor;
      hv_.k_.cp().on_illegal(core, *trap);
    } else {
      take_exit(core, *trap);
    }
  }
  return true;
}

bool Vthread::guest_step(CoreId core)
{
  auto& vc = v();
  auto& c = hv_.k_.machine().core(core);
  gpa_.emplace(hv_.gpa_access(core));
  vc.cpu.pc = c.pc;
  const auto out = guest::step(hv_.program_, vc.cpu, *this);
  c.pc = vc.cpu.pc;
  switch (out.kind) {
    case guest::StepOutcome::Kind::Retired: return true;
    case guest::StepOutcome::Kind::Exit:
      take_exit(core, hv_.k_.machine().route_trap(core, out.reason, out.info));
      return true;
    case guest::StepOutcome::Kind::PmcFault: {
      const auto trap = hv_.k_.machine().route_trap(core, ExitReason::PmcFault, out.info);
      auto e = hv_.event(EventKind::VmExit, core, Mode::V);
      e.vcpuid = static_cast<std::uint16_t>(id_);
      e.reason = static_cast<std::uint8_t>(trap.reason);
      e.info = trap.info;
      e.handler = Handler::ExitToHs;
      hv_.k_.emit(e);
      vc.status = VcpuStatus::InHypervisor;
      hv_.k_.cp().on_pmc_fault(core, out.info);
      return true;
    }
    case guest::StepOutcome::Kind::Abort: abort(core, out.message); return true;
  }
  return true;
}

bool Vthread::handle(CoreId core)
{
  const auto er = csr(core, Reg::HuEr, CsrOp::Read);
  const auto info = csr(core, Reg::HuEinfo, CsrOp::Read);
  if (!er || !info)
    return true;
  if (*er >= hw::kExitReasonCount || !hw::is_delegatable(static_cast<ExitReason>(*er))) {
    hv_.panic(core, "unknown exit code " + std::to_string(*er));
    return true;
  }
  const auto reason = static_cast<ExitReason>(*er);
  if (is_s2pf(reason))
    return handle_s2pf(core, *info);
  switch (reason) {
    case ExitReason::Hypercall: return handle_hypercall(core);
    case ExitReason::SensitiveWfi:
      dispatch(core, Handler::Wfi, 0);
      if (!advance_vpc(core))
        return true;
      if (v().state.empty()) {
        v().status = VcpuStatus::Blocked;
        phase_ = Phase::Blocked;
      } else {
        phase_ = Phase::Enter;
      }
      return true;
    case ExitReason::Uipi:
      dispatch(core, Handler::Uipi, *info);
      phase_ = Phase::Enter;
      return true;
    default: break;
  }
  hv_.panic(core, "unhandled exit " + std::string(hw::to_string(reason)));
  return true;
}

bool Vthread::handle_s2pf(CoreId core, Word gpa)
{
  if (hv_.in_ram(gpa)) {
    dispatch(core, Handler::S2pf, gpa);
    if (!hv_.map_page(core, gpa, exit_idx_, false)) {
      if (hv_.alive())
        abort(core, "guest out of memory");
      return true;
    }
    phase_ = Phase::Enter;
    return true;
  }
  const auto vpc = csr(core, Reg::HuVpc, CsrOp::Read);
  if (!vpc)
    return true;
  const auto idx = guest::instr_index(hv_.program_, *vpc);
  using guest::Op;
  if (!idx) {
    abort(core, "fault outside guest memory");
    return true;
  }
  const auto& in = hv_.program_.code[*idx];
  if (in.op != Op::MmioLoad && in.op != Op::MmioStore && in.op != Op::Load && in.op != Op::Store) {
    abort(core, "fault outside guest memory");
    return true;
  }
  dispatch(core, Handler::Mmio, gpa);
  if (!hv_.mmio(core, v(), gpa, in, exit_idx_)) {
    abort(core, "bad MMIO access");
    return true;
  }
  if (advance_vpc(core))
    phase_ = Phase::Enter;
  return true;
}

bool Vthread::handle_hypercall(CoreId core)
{
  auto& cpu = v().cpu;
  const Word nr = cpu.regs[guest::kRegNr];
  switch (nr) {
    case guest::hcall::kNull:
      dispatch(core, Handler::HypercallNull, nr);
      cpu.set(guest::kRegArg, 0);
      break;
    case guest::hcall::kVipi: {
      dispatch(core, Handler::HypercallVipi, nr);
      const Word target = cpu.regs[guest::kRegArg];
      if (target < hv_.vcpus_.size()) {
        hv_.inject_virq(core, static_cast<std::uint32_t>(target), pvio::kIpiIrq, Handler::InsertVipi, exit_idx_);
        if (!hv_.alive())
          return true;
        cpu.set(guest::kRegArg, 0);
      } else {
        cpu.set(guest::kRegArg, guest::hcall::kErrUnknown);
      }
      break;
    }
    case guest::hcall::kHalt: {
      dispatch(core, Handler::HypercallHalt, nr);
      auto e = hv_.event(EventKind::GuestHalt, core, Mode::HU);
      e.vcpuid = static_cast<std::uint16_t>(id_);
      e.link = exit_idx_;
      hv_.k_.emit(e);
      v().status = VcpuStatus::Halted;
      phase_ = Phase::Halted;
      return true;
    }
    default:
      dispatch(core, Handler::HypercallUnknown, nr);
      cpu.set(guest::kRegArg, guest::hcall::kErrUnknown);
      break;
  }
  if (advance_vpc(core))
    phase_ = Phase::Enter;
  return true;
}

// ---------------------------------------------------------------------------

bool IoThread::step(CoreId core)
{
  if (!hv_.alive() || broken_)
    return false;
  auto& k = hv_.k_;
  if (!started_) {
    // Not a vCPU: make sure no UIPI can ever match this core.
    auto r = k.machine().csr_access(core, Reg::HuVcpuid, CsrOp::Write, ~Word{0});
    if (auto* trap = std::get_if<hw::TrapEvent>(&r)) {
      k.cp().on_illegal(core, *trap);
      return true;
    }
    started_ = true;
    return true;
  }
  auto mem = hv_.gpa_access(core);
  pvio::ServiceResult r;
  EventKind kind = EventKind::BackendRx;
  switch (role_) {
    case Role::NetRx: {
      auto* net = hv_.net_.get();
      r = net->rx_poll(mem, k.cycle(), [&] {
        net->mmio().raise();
        hv_.inject_virq(core, irq_vcpu_, net->layout().irq, Handler::InsertDevice);
      });
      break;
    }
    case Role::NetTx:
      if (!hv_.net_->tx_pending())
        return false;
      r = hv_.net_->tx_drain(mem);
      kind = EventKind::BackendTx;
      break;
    case Role::Blk: {
      auto* blk = hv_.blk_.get();
      if (!blk->pending())
        return false;
      r = blk->process(mem, [&] {
        blk->mmio().raise();
        hv_.inject_virq(core, irq_vcpu_, blk->layout().irq, Handler::InsertDevice);
      });
      kind = EventKind::BackendBlk;
      break;
    }
  }
  if (!hv_.alive())
    return true;
  if (r.completed > 0) {
    auto e = hv_.event(kind, core, Mode::HU);
    e.info = r.completed;
    k.emit(e);
  }
  if (r.fault)
    return on_fault(core, *r.fault) || r.progress;
  return r.progress;
}

bool IoThread::on_fault(CoreId core, const mmu::Fault& f)
{
  switch (f.kind) {
    case mmu::FaultKind::S2PageFault:
      if (hv_.in_ram(f.addr) && hv_.map_page(core, f.addr, kNoLink, false))
        return true;
      // The guest pointed the device outside its memory; stop serving it.
      broken_ = true;
      return true;
    case mmu::FaultKind::PmcViolation: hv_.pmc_fault(core, f.addr); return true;
    case mmu::FaultKind::S1PageFault: break;
  }
  broken_ = true;
  return true;
}

// ---------------------------------------------------------------------------

Hypervisor::Hypervisor(sim::Kernel& kernel, VmConfig cfg, guest::Program program)
  : k_(kernel), cfg_(std::move(cfg)), program_(std::move(program))
{}

Hypervisor::~Hypervisor() = default;

bool Hypervisor::alive() const
{
  return booted_ && k_.cp().alive(pid_);
}

bool Hypervisor::finished() const
{
  if (!alive())
    return true;
  return std::all_of(vcpus_.begin(), vcpus_.end(), [](const VcpuState& v) {
    return v.status == VcpuStatus::Halted || v.status == VcpuStatus::Aborted;
  });
}

const pvio::DeviceLayout* Hypervisor::device_layout(pvio::DeviceKind kind) const
{
  for (const auto& d : layouts_)
    if (d.kind == kind)
      return &d;
  return nullptr;
}

sim::TraceEvent Hypervisor::event(EventKind kind, CoreId core, Mode mode) const
{
  sim::TraceEvent e;
  e.kind = kind;
  e.core = static_cast<std::uint16_t>(core);
  e.mode = mode;
  e.pid = pid_;
  e.vmid = static_cast<std::uint16_t>(vmid_);
  return e;
}

pvio::GpaAccess Hypervisor::gpa_access(CoreId core)
{
  return pvio::GpaAccess(k_.memory(), [this, core](std::uint64_t gpa, mmu::Access a, std::uint64_t len) {
    return mmu::translate_gpa(k_.walk_context(core), k_.machine().core(core).s2_root, gpa, a, len);
  });
}

std::optional<std::uint64_t> Hypervisor::take_page(CoreId core, std::uint32_t)
{
  if (auto p = alloc_.next_page())
    return p;
  if (extensions_used_ >= cfg_.grant_extensions)
    return std::nullopt;
  ++extensions_used_;
  try {
    alloc_.add_grant(k_.cp().ioctl_alloc_region(pid_, cfg_.grant_size, core));
  } catch (const ConfigError&) {
    return std::nullopt;
  }
  return alloc_.next_page();
}

std::uint64_t Hypervisor::alloc_page(CoreId core, std::uint32_t link)
{
  auto p = take_page(core, link);
  if (!p)
    throw OutOfGrants{};
  return *p;
}

bool Hypervisor::map_page(CoreId core, std::uint64_t gpa, std::uint32_t link, bool boot)
{
  const std::uint64_t page = page_down(gpa);
  if (s2pt_->lookup(page))
    return true;
  auto hpa = take_page(core, link);
  if (!hpa)
    return false;
  auto a = event(EventKind::PageAlloc, core, Mode::HU);
  a.info = *hpa;
  a.link = link;
  k_.emit(a);
  const std::uint64_t target = map_hook_ && !boot ? map_hook_(page, *hpa) : *hpa;
  node_core_ = core;
  node_link_ = link;
  try {
    s2pt_->map(page, target, mmu::kPermRWX);
  } catch (const OutOfGrants&) {
    return false;
  }
  auto m = event(EventKind::S2Map, core, Mode::HU);
  m.info = page;
  m.link = link;
  k_.emit(m);
  return true;
}

void Hypervisor::panic(CoreId core, const std::string& why)
{
  panicked_ = true;
  auto e = event(EventKind::Panic, core, Mode::HU);
  k_.emit(e);
  k_.cp().kill(pid_, "hypervisor panic: " + why);
}

void Hypervisor::pmc_fault(CoreId core, std::uint64_t hpa)
{
  k_.machine().route_trap(core, ExitReason::PmcFault, hpa);
  k_.cp().on_pmc_fault(core, hpa);
}

bool Hypervisor::mmio(CoreId core, VcpuState& v, std::uint64_t gpa, const guest::Instr& in, std::uint32_t link)
{
  using guest::Op;
  const pvio::DeviceLayout* dev = nullptr;
  for (const auto& d : layouts_)
    if (gpa >= d.mmio_base && gpa < d.mmio_base + pvio::kMmioWindow)
      dev = &d;
  if (!dev || gpa + in.width > dev->mmio_base + pvio::kMmioWindow)
    return false;
  const bool load = in.op == Op::MmioLoad || in.op == Op::Load;
  const std::uint64_t off = gpa - dev->mmio_base;
  const std::uint64_t mask = in.width >= 8 ? ~std::uint64_t{0} : (std::uint64_t{1} << (8 * in.width)) - 1;
  const std::uint64_t value = v.cpu.regs[in.rd] & mask;

  auto e = event(EventKind::MmioEmul, core, Mode::HU);
  e.vcpuid = static_cast<std::uint16_t>(v.vcpuid);
  e.info = gpa;
  e.link = link;
  k_.emit(e);

  std::uint64_t result = 0;
  std::optional<unsigned> kicked;
  switch (dev->kind) {
    case pvio::DeviceKind::Console:
      if (load)
        result = console_->read(off);
      else
        console_->write(off, value);
      break;
    case pvio::DeviceKind::Net:
      if (load)
        result = net_->mmio().read(off);
      else if ((kicked = net_->mmio().write(off, value)))
        net_->kick(*kicked);
      break;
    case pvio::DeviceKind::Blk:
      if (load)
        result = blk_->mmio().read(off);
      else if ((kicked = blk_->mmio().write(off, value)))
        blk_->kick(*kicked);
      break;
  }
  if (kicked) {
    auto kick = event(EventKind::Kick, core, Mode::HU);
    kick.vcpuid = static_cast<std::uint16_t>(v.vcpuid);
    kick.info = *kicked;
    kick.link = link;
    k_.emit(kick);
  }
  if (load)
    v.cpu.set(in.rd, result & mask);
  return true;
}

std::uint32_t Hypervisor::inject_virq(CoreId caller, std::uint32_t target, unsigned irq, Handler source,
                                      std::uint32_t link)
{
  if (target >= vcpus_.size() || irq >= 64)
    throw std::logic_error("inject_virq: bad target or irq");
  auto& v = vcpus_[target];
  auto e = event(EventKind::Insert, caller, Mode::HU);
  e.vcpuid = static_cast<std::uint16_t>(target);
  e.info = irq;
  e.handler = source;
  e.link = link;
  const auto idx = k_.emit(e);

  // Step one: the state area, always, before any UIPI.
  const Word bit = Word{1} << irq;
  if (!(v.state.pending & bit)) {
    const auto sender = source == Handler::InsertVipi
                            ? static_cast<std::uint16_t>(k_.machine().core(caller).regs.hu_vcpuid)
                            : kDeviceSender;
    v.state.tags[irq] = IrqTag{sender, k_.cycle(), idx};
  }
  v.state.pending |= bit;
  if (v.status != VcpuStatus::InGuest)
    return idx;

  // Step two: the vCPU is in the guest, so interrupt it.
  const auto r = k_.machine().exec_husuipi(caller, target);
  auto s = event(EventKind::UipiSend, caller, Mode::HU);
  s.vcpuid = static_cast<std::uint16_t>(target);
  s.info = static_cast<std::uint64_t>(r.outcome);
  s.link = idx;
  k_.emit(s);
  switch (r.outcome) {
    case hw::UipiResult::Outcome::Delivered: vthreads_[target]->take_exit(*r.target, *r.trap); break;
    case hw::UipiResult::Outcome::Latched: {
      auto l = event(EventKind::UipiLatch, *r.target, Mode::HU);
      l.vcpuid = static_cast<std::uint16_t>(target);
      k_.emit(l);
      break;
    }
    case hw::UipiResult::Outcome::Faulted:
      if (!k_.cp().on_uipi_fault(caller, target))
        panic(caller, "UIPI to own vCPU faulted");
      break;
  }
  return idx;
}

void Hypervisor::boot()
{
  if (booted_)
    throw BootError("VM already booted");
  auto& cp = k_.cp();
  const auto cores = k_.machine().core_count();
  if (cfg_.vcpus == 0)
    throw BootError("a VM needs at least one vCPU");
  if (cfg_.memory == 0 || !mmu::page_aligned(cfg_.memory) || cfg_.memory <= kS1PoolBytes)
    throw BootError("guest memory must be a page multiple larger than 2 MiB");
  if (cfg_.ram_end() > mmu::kAddrLimit)
    throw BootError("guest memory does not fit the 39-bit guest physical space");
  for (std::uint32_t i = 0; i < cfg_.vcpus; ++i)
    if ((i < cfg_.vcpu_cores.size() ? cfg_.vcpu_cores[i] : i) >= cores)
      throw BootError("vCPU pinned to a core that does not exist");
  for (CoreId c : cfg_.io_cores)
    if (c >= cores)
      throw BootError("I/O thread pinned to a core that does not exist");
  for (const auto& [vcpu, _] : program_.entries)
    if (vcpu >= cfg_.vcpus)
      throw BootError("guest program has an entry for a vCPU the VM does not have");

  // Devices and their placement, checked before anything is allocated.
  std::vector<pvio::DeviceKind> kinds;
  for (const auto& d : cfg_.devices) {
    if (std::find(kinds.begin(), kinds.end(), d.kind) != kinds.end())
      throw BootError("device listed twice: " + std::string(pvio::to_string(d.kind)));
    if (d.irq_vcpu >= cfg_.vcpus)
      throw BootError("device interrupt routed to a missing vCPU");
    kinds.push_back(d.kind);
  }
  const auto image = guest::build_image(program_);
  if (kRamBase + image.size() > s1_pool())
    throw BootError("guest image larger than guest memory");
  const auto area_bytes = pvio::layout_devices(kinds, 0).second;
  driver_area_ = page_down(s1_pool() - area_bytes);
  if (driver_area_ < kRamBase + page_up(image.size()))
    throw BootError("guest memory too small for the image and the device rings");
  layouts_ = pvio::layout_devices(kinds, driver_area_).first;
  for (std::size_t i = 0; i < layouts_.size(); ++i)
    if (cfg_.devices[i].mmio_base != 0)
      layouts_[i].mmio_base = cfg_.devices[i].mmio_base;
  for (std::size_t i = 0; i < layouts_.size(); ++i) {
    const auto b = layouts_[i].mmio_base;
    if (!mmu::page_aligned(b) || b + pvio::kMmioWindow > mmu::kAddrLimit)
      throw BootError("MMIO window must be page-aligned and inside the guest physical space");
    if (b < cfg_.ram_end() && b + pvio::kMmioWindow > kRamBase)
      throw BootError("MMIO window overlaps guest RAM");
    for (std::size_t j = 0; j < i; ++j)
      if (layouts_[j].mmio_base < b + pvio::kMmioWindow && b < layouts_[j].mmio_base + pvio::kMmioWindow)
        throw BootError("MMIO windows overlap");
  }

  pid_ = cp.spawn();
  if (!cfg_.skip_enable_dv)
    vmid_ = cp.ioctl_enable_dv(pid_, cfg_.deleg);
  if (!cp.process(pid_).dv_enabled)
    throw BootError("DV-Ext is not enabled for the hypervisor process");
  if (cfg_.initial_grants == 0)
    throw BootError("no memory grant");
  try {
    for (std::uint32_t i = 0; i < cfg_.initial_grants; ++i)
      alloc_.add_grant(cp.ioctl_alloc_region(pid_, cfg_.grant_size, 0));
  } catch (const ConfigError& e) {
    throw BootError(std::string("memory grant refused: ") + e.what());
  }

  const CoreId boot_core = cfg_.vcpu_cores.empty() ? 0 : cfg_.vcpu_cores[0];
  node_core_ = boot_core;
  try {
    s2pt_ = std::make_unique<mmu::StageTwoPageTable>(k_.memory(), [this] {
      const auto hpa = alloc_page(node_core_, node_link_);
      auto e = event(EventKind::S2NodeAlloc, node_core_, Mode::HU);
      e.info = hpa;
      e.link = node_link_;
      k_.emit(e);
      return hpa;
    });
  } catch (const OutOfGrants&) {
    throw BootError("grant too small for the stage-2 root");
  }
  cp.ioctl_set_s2pt_root(pid_, s2pt_->root());

  auto boot_map = [&](std::uint64_t gpa) {
    if (!map_page(boot_core, gpa, kNoLink, true))
      throw BootError("grants exhausted while loading the guest");
    return s2pt_->lookup(page_down(gpa))->hpa + (gpa & (kPageSize - 1));
  };
  for (std::uint64_t off = 0; off < image.size(); off += kPageSize) {
    const std::uint64_t n = std::min<std::uint64_t>(kPageSize, image.size() - off);
    k_.memory().write(boot_map(kRamBase + off), std::span(image).subspan(off, n));
  }
  for (std::uint64_t gpa = driver_area_; gpa < s1_pool(); gpa += kPageSize)
    boot_map(gpa);
  if (cfg_.premap)
    for (std::uint64_t gpa = kRamBase; gpa < cfg_.ram_end(); gpa += kPageSize)
      boot_map(gpa);

  // Each vCPU gets its own slice of the stage-1 pool.
  vcpus_.resize(cfg_.vcpus);
  const std::uint64_t slice = page_down(kS1PoolBytes / cfg_.vcpus);
  if (program_.s1 != guest::S1Mode::None && slice < 4 * kPageSize)
    throw BootError("too many vCPUs for the stage-1 pool");
  for (std::uint32_t i = 0; i < cfg_.vcpus; ++i) {
    auto& v = vcpus_[i];
    v.vcpuid = i;
    v.core = i < cfg_.vcpu_cores.size() ? cfg_.vcpu_cores[i] : i;
    v.cpu.pc = program_.entry_pc(i);
    if (program_.s1 == guest::S1Mode::None)
      continue;
    const std::uint64_t root = s1_pool() + i * slice;
    v.cpu.s1_root = root;
    v.cpu.s1_pool_next = root + kPageSize;
    v.cpu.s1_pool_end = root + slice;
    if (program_.s1 != guest::S1Mode::Explicit)
      continue;
    // The loader builds explicit tables the way the guest's own setup would.
    auto reader = [&](std::uint64_t gpa) -> std::optional<std::uint64_t> {
      return k_.memory().read_u64(boot_map(gpa));
    };
    auto writer = [&](std::uint64_t gpa, std::uint64_t value) {
      k_.memory().write_u64(boot_map(gpa), value);
      return true;
    };
    boot_map(root);
    for (const auto& m : program_.maps)
      if (!mmu::StageOnePageTable{root}.map(m.gva, m.gpa, m.perms, reader, writer, v.cpu.s1_pool_next,
                                            v.cpu.s1_pool_end))
        throw BootError("stage-1 pool too small for the explicit mappings");
  }

  console_ = std::make_unique<pvio::Console>();
  std::size_t io_next = 0;
  auto io_core = [&]() -> CoreId {
    if (io_next < cfg_.io_cores.size())
      return cfg_.io_cores[io_next++];
    ++io_next;
    return static_cast<CoreId>(std::min<std::size_t>(cfg_.vcpus + io_next - 1, cores - 1));
  };

  // vthreads first so vCPU i's thread is created before any I/O thread.
  vthreads_.reserve(cfg_.vcpus);
  for (std::uint32_t i = 0; i < cfg_.vcpus; ++i) {
    vthreads_.push_back(std::make_unique<Vthread>(*this, i));
    vcpus_[i].tid = cp.create_thread(pid_, vcpus_[i].core, kExitHandlerPc);
    k_.add_actor(vcpus_[i].tid, vthreads_.back().get());
  }
  auto spawn_io = [&](IoThread::Role role, std::uint32_t irq_vcpu) {
    io_threads_.push_back(std::make_unique<IoThread>(*this, role, irq_vcpu));
    const auto tid = cp.create_thread(pid_, io_core(), kIoThreadPc);
    k_.add_actor(tid, io_threads_.back().get());
  };
  for (std::size_t i = 0; i < layouts_.size(); ++i) {
    const auto& d = cfg_.devices[i];
    switch (d.kind) {
      case pvio::DeviceKind::Console: break;
      case pvio::DeviceKind::Net:
        net_ = std::make_unique<pvio::NetBackend>(layouts_[i], pvio::PacketSource(cfg_.packets));
        spawn_io(IoThread::Role::NetRx, d.irq_vcpu);
        spawn_io(IoThread::Role::NetTx, d.irq_vcpu);
        break;
      case pvio::DeviceKind::Blk:
        blk_ = std::make_unique<pvio::BlkBackend>(layouts_[i], cfg_.disk_image);
        spawn_io(IoThread::Role::Blk, d.irq_vcpu);
        break;
    }
  }

  booted_ = true;
  auto e = event(EventKind::BootDone, boot_core, Mode::HU);
  e.info = cfg_.vcpus;
  k_.emit(e);
}

} // namespace duvisor::hv
