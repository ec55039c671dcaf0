#include "duvisor/guest/executor.hpp"

#include <bit>
#include <cstdio>

#include "duvisor/pvio/devices.hpp"
#include "duvisor/util/hash.hpp"

namespace duvisor::guest {

using mmu::Access;
using mmu::Fault;
using mmu::FaultKind;
using mmu::kPageSize;

namespace {

StepOutcome from_fault(const Fault& f, Access access)
{
  switch (f.kind) {
    case FaultKind::S2PageFault: return StepOutcome::exit(mmu::s2pf_reason(access), f.addr);
    case FaultKind::PmcViolation: return StepOutcome::pmc(f.addr);
    case FaultKind::S1PageFault: break;
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "unhandled stage-1 page fault at gva 0x%llx",
                static_cast<unsigned long long>(f.addr));
  return StepOutcome::abort(buf);
}

/// Result of a guest-virtual access: a host address or the outcome to report.
struct Resolved
{
  std::optional<std::uint64_t> hpa;
  StepOutcome outcome;
};

/// The in-guest stage-1 fault stub: identity-map the faulting page from the
/// page-table pool, then retry. Its own memory traffic is ordinary guest
/// traffic, so it can itself take a stage-2 fault.
std::optional<StepOutcome> s1_stub(GuestCpu& cpu, GuestPort& port, std::uint64_t gva)
{
  auto& mem = port.gpa_access();
  std::optional<Fault> fault;
  Access fault_access = Access::Read;
  auto reader = [&](std::uint64_t gpa) -> std::optional<std::uint64_t> {
    if (auto f = mem.probe(gpa, 8, Access::Read)) {
      fault = f;
      fault_access = Access::Read;
      return std::nullopt;
    }
    return mem.read_uint(gpa, 8);
  };
  auto writer = [&](std::uint64_t gpa, std::uint64_t v) {
    if (auto f = mem.probe(gpa, 8, Access::Write)) {
      fault = f;
      fault_access = Access::Write;
      return false;
    }
    mem.write_uint(gpa, v, 8);
    return true;
  };
  const auto page = gva & ~(kPageSize - 1);
  if (stage_one(cpu).map(page, page, mmu::kPermRWX, reader, writer, cpu.s1_pool_next, cpu.s1_pool_end)) {
    ++cpu.s1_stub_maps;
    return std::nullopt;
  }
  if (fault)
    return from_fault(*fault, fault_access);
  return StepOutcome::abort("stage-1 page-table pool exhausted");
}

Resolved resolve(const Program& prog, GuestCpu& cpu, GuestPort& port, std::uint64_t gva, Access access,
                 std::uint64_t len)
{
  for (int attempt = 0; attempt < 4; ++attempt) {
    auto r = port.translate(cpu.s1_root, gva, access, len);
    if (auto* t = std::get_if<mmu::Translation>(&r))
      return {t->hpa, {}};
    const auto& f = std::get<Fault>(r);
    if (f.kind != FaultKind::S1PageFault || prog.s1 != S1Mode::Identity)
      return {std::nullopt, from_fault(f, access)};
    if (auto out = s1_stub(cpu, port, gva))
      return {std::nullopt, *out};
  }
  return {std::nullopt, StepOutcome::abort("stage-1 stub failed to map the page")};
}

bool crosses_page(std::uint64_t addr, std::uint64_t len)
{
  return (addr & (kPageSize - 1)) + len > kPageSize;
}

const pvio::QueueLayout* queue_of(GuestPort& port, pvio::DeviceKind dev, unsigned q)
{
  const auto* d = port.device(dev);
  if (!d || q >= d->queues.size())
    return nullptr;
  return &d->queues[q];
}

std::optional<Fault> vio_post(GuestCpu& cpu, pvio::GpaAccess& mem, const pvio::QueueLayout& q,
                              pvio::DeviceKind dev, std::uint8_t qi, std::uint16_t count)
{
  if (auto f = pvio::ring::probe_rings(mem, q))
    return f;
  auto& st = cpu.queues[{dev, qi}];
  const bool device_writes = dev == pvio::DeviceKind::Net && qi == pvio::kNetRx;
  for (std::uint16_t k = 0; k < count; ++k) {
    const auto id = static_cast<std::uint16_t>(st.posted % q.size);
    pvio::ring::write_desc(mem, q, id,
                           {q.buffer(id), q.buf_size, device_writes ? pvio::ring::kDescWrite : std::uint16_t{0}, 0});
    pvio::ring::set_avail_entry(mem, q, st.next_avail, id);
    ++st.next_avail;
    ++st.posted;
    if (device_writes)
      cpu.rx_posted.push_back(id);
  }
  pvio::ring::set_avail_idx(mem, q, st.next_avail);
  return std::nullopt;
}

std::optional<Fault> vio_reap(GuestCpu& cpu, pvio::GpaAccess& mem, const pvio::QueueLayout& q,
                              pvio::DeviceKind dev, std::uint8_t qi)
{
  if (auto f = pvio::ring::probe_rings(mem, q))
    return f;
  auto& st = cpu.queues[{dev, qi}];
  const std::uint16_t used = pvio::ring::used_idx(mem, q);
  std::vector<pvio::ring::UsedElem> done;
  for (std::uint16_t u = st.last_used; u != used; ++u)
    done.push_back(pvio::ring::used_entry(mem, q, u));

  const bool rx = dev == pvio::DeviceKind::Net && qi == pvio::kNetRx;
  const bool blk = dev == pvio::DeviceKind::Blk;
  // Probe everything this pass reads before changing any guest state.
  for (const auto& e : done) {
    const auto d = pvio::ring::read_desc(mem, q, static_cast<std::uint16_t>(e.id));
    if (rx) {
      if (auto f = mem.probe(d.addr, e.len, Access::Read))
        return f;
    } else if (blk) {
      const auto data = pvio::ring::read_desc(mem, q, d.next);
      const auto status = pvio::ring::read_desc(mem, q, data.next);
      if (auto f = mem.probe(data.addr, data.len, Access::Read))
        return f;
      if (auto f = mem.probe(status.addr, 1, Access::Read))
        return f;
    }
  }

  for (const auto& e : done) {
    const auto id = static_cast<std::uint16_t>(e.id);
    const auto d = pvio::ring::read_desc(mem, q, id);
    if (rx) {
      std::vector<std::uint8_t> payload(e.len);
      mem.read(d.addr, payload);
      const auto cs = pvio::payload_checksum(payload);
      cpu.rx_checksums.push_back(cs);
      cpu.set(kRegRxCount, cpu.regs[kRegRxCount] + 1);
      cpu.set(kRegRxSum, fnv1a_chain(cpu.regs[kRegRxSum], cs));
      // Recycle the buffer straight back to the device.
      pvio::ring::set_avail_entry(mem, q, st.next_avail, id);
      ++st.next_avail;
      ++st.posted;
      cpu.rx_posted.push_back(id);
    } else if (blk) {
      const auto data = pvio::ring::read_desc(mem, q, d.next);
      const auto status = pvio::ring::read_desc(mem, q, data.next);
      cpu.set(11, mem.read_uint(status.addr, 1));
      if (e.len > 1) {
        std::vector<std::uint8_t> bytes(e.len - 1);
        mem.read(data.addr, bytes);
        cpu.set(kRegRxSum, fnv1a_chain(cpu.regs[kRegRxSum], pvio::payload_checksum(bytes)));
      }
    }
  }
  if (rx && !done.empty())
    pvio::ring::set_avail_idx(mem, q, st.next_avail);
  st.last_used = used;
  cpu.set(kRegArg, done.size());
  return std::nullopt;
}

std::optional<Fault> vio_send(GuestCpu& cpu, pvio::GpaAccess& mem, const pvio::QueueLayout& q,
                              std::uint32_t len)
{
  if (auto f = pvio::ring::probe_rings(mem, q))
    return f;
  auto& st = cpu.queues[{pvio::DeviceKind::Net, static_cast<std::uint8_t>(pvio::kNetTx)}];
  const auto id = static_cast<std::uint16_t>(st.posted % q.size);
  if (auto f = mem.probe(q.buffer(id), len, Access::Write))
    return f;
  std::vector<std::uint8_t> bytes(len);
  for (std::uint32_t j = 0; j < len; ++j)
    bytes[j] = static_cast<std::uint8_t>(cpu.tx_sent * 131 + j);
  mem.write(q.buffer(id), bytes);
  pvio::ring::write_desc(mem, q, id, {q.buffer(id), len, 0, 0});
  pvio::ring::set_avail_entry(mem, q, st.next_avail, id);
  ++st.next_avail;
  ++st.posted;
  ++cpu.tx_sent;
  pvio::ring::set_avail_idx(mem, q, st.next_avail);
  return std::nullopt;
}

std::optional<Fault> vio_blk(GuestCpu& cpu, pvio::GpaAccess& mem, const pvio::QueueLayout& q, bool write,
                             std::uint64_t sector, std::uint32_t sectors)
{
  if (auto f = pvio::ring::probe_rings(mem, q))
    return f;
  auto& st = cpu.queues[{pvio::DeviceKind::Blk, 0}];
  // Three descriptors per request; 85 requests fit in a 256-entry table.
  const std::uint32_t slots = q.size / 3;
  const std::uint32_t req = st.posted % slots;
  const auto head = static_cast<std::uint16_t>(req * 3);
  const std::uint64_t hdr = q.aux + 16ull * req;
  const std::uint64_t status = q.aux + mmu::kPageSize + req;
  const std::uint64_t data = q.buffer(head);
  const std::uint32_t len = sectors * pvio::kSectorSize;
  for (auto [a, n] : {std::pair<std::uint64_t, std::uint64_t>{hdr, 16}, {status, 1}, {data, len}})
    if (auto f = mem.probe(a, n, Access::Write))
      return f;
  mem.write_uint(hdr, write ? pvio::blk::kOut : pvio::blk::kIn, 4);
  mem.write_uint(hdr + 4, 0, 4);
  mem.write_uint(hdr + 8, sector, 8);
  mem.write_uint(status, 0xff, 1);
  if (write) {
    std::vector<std::uint8_t> bytes(len);
    for (std::uint32_t j = 0; j < len; ++j)
      bytes[j] = static_cast<std::uint8_t>(sector * 7 + j);
    mem.write(data, bytes);
  }
  using pvio::ring::kDescNext;
  using pvio::ring::kDescWrite;
  pvio::ring::write_desc(mem, q, head, {hdr, 16, kDescNext, static_cast<std::uint16_t>(head + 1)});
  pvio::ring::write_desc(mem, q, static_cast<std::uint16_t>(head + 1),
                         {data, len, static_cast<std::uint16_t>(kDescNext | (write ? 0 : kDescWrite)),
                          static_cast<std::uint16_t>(head + 2)});
  pvio::ring::write_desc(mem, q, static_cast<std::uint16_t>(head + 2), {status, 1, kDescWrite, 0});
  pvio::ring::set_avail_entry(mem, q, st.next_avail, head);
  ++st.next_avail;
  ++st.posted;
  pvio::ring::set_avail_idx(mem, q, st.next_avail);
  return std::nullopt;
}

} // namespace

mmu::StageOnePageTable stage_one(const GuestCpu& cpu)
{
  return mmu::StageOnePageTable{cpu.s1_root.value_or(0)};
}

std::optional<std::uint32_t> instr_index(const Program& p, std::uint64_t pc)
{
  if (pc < kCodeBase || (pc - kCodeBase) % kInstrBytes != 0)
    return std::nullopt;
  const std::uint64_t idx = (pc - kCodeBase) / kInstrBytes;
  if (idx >= p.code.size())
    return std::nullopt;
  return static_cast<std::uint32_t>(idx);
}

StepOutcome step(const Program& prog, GuestCpu& cpu, GuestPort& port)
{
  const auto idx = instr_index(prog, cpu.pc);
  if (!idx)
    return StepOutcome::abort("pc outside the program");
  auto fetched = resolve(prog, cpu, port, cpu.pc, Access::Execute, kInstrBytes);
  if (!fetched.hpa)
    return fetched.outcome;

  const Instr& in = prog.code[*idx];
  std::uint64_t next = cpu.pc + kInstrBytes;
  auto& mem = port.memory();

  switch (in.op) {
    case Op::Nop: break;
    case Op::Li: cpu.set(in.rd, static_cast<std::uint64_t>(in.imm)); break;
    case Op::Addi: cpu.set(in.rd, cpu.regs[in.rs] + static_cast<std::uint64_t>(in.imm)); break;
    case Op::Load:
    case Op::Store: {
      const std::uint64_t gva = in.based ? cpu.regs[in.rs] + static_cast<std::uint64_t>(in.imm) : in.addr;
      if (crosses_page(gva, in.width))
        return StepOutcome::abort("access crosses a page boundary");
      const Access acc = in.op == Op::Load ? Access::Read : Access::Write;
      auto r = resolve(prog, cpu, port, gva, acc, in.width);
      if (!r.hpa)
        return r.outcome;
      if (in.op == Op::Load)
        cpu.set(in.rd, mem.read_uint(*r.hpa, in.width, mmu::Origin::Guest));
      else
        mem.write_uint(*r.hpa, cpu.regs[in.rd], in.width, mmu::Origin::Guest);
      break;
    }
    case Op::MmioLoad:
    case Op::MmioStore: {
      if (crosses_page(in.addr, in.width))
        return StepOutcome::abort("access crosses a page boundary");
      const Access acc = in.op == Op::MmioLoad ? Access::Read : Access::Write;
      auto r = port.translate_gpa(in.addr, acc, in.width);
      if (auto* f = std::get_if<Fault>(&r))
        return from_fault(*f, acc);
      // Backed by RAM after all: an ordinary access.
      const auto hpa = std::get<mmu::Translation>(r).hpa;
      if (acc == Access::Read)
        cpu.set(in.rd, mem.read_uint(hpa, in.width, mmu::Origin::Guest));
      else
        mem.write_uint(hpa, cpu.regs[in.rd], in.width, mmu::Origin::Guest);
      break;
    }
    case Op::Hypercall:
      cpu.set(kRegNr, static_cast<std::uint64_t>(in.imm));
      if (in.has_arg)
        cpu.set(kRegArg, in.addr);
      return StepOutcome::exit(hw::ExitReason::Hypercall, static_cast<std::uint64_t>(in.imm));
    case Op::Halt:
      cpu.set(kRegNr, hcall::kHalt);
      return StepOutcome::exit(hw::ExitReason::Hypercall, hcall::kHalt);
    case Op::Wfi:
      if (port.vip() == 0)
        return StepOutcome::exit(hw::ExitReason::SensitiveWfi, 0);
      break;
    case Op::IrqAck: {
      auto& vip = port.vip();
      if (vip == 0) {
        cpu.set(in.rd, 0);
        break;
      }
      const unsigned irq = 63 - static_cast<unsigned>(std::countl_zero(vip));
      vip &= ~(hw::Word{1} << irq);
      cpu.set(in.rd, irq);
      port.irq_acked(irq);
      break;
    }
    case Op::LoopBegin:
      if (in.imm == 0)
        next = kCodeBase + kInstrBytes * (in.partner + 1);
      else
        cpu.loops.push_back({*idx, static_cast<std::uint64_t>(in.imm)});
      break;
    case Op::LoopEnd: {
      if (cpu.loops.empty() || cpu.loops.back().begin != in.partner)
        return StepOutcome::abort("loop stack corrupted");
      auto& top = cpu.loops.back();
      if (--top.remaining > 0)
        next = kCodeBase + kInstrBytes * (top.begin + 1);
      else
        cpu.loops.pop_back();
      break;
    }
    case Op::VioPost:
    case Op::VioReap:
    case Op::VioSend:
    case Op::VioBlk: {
      const unsigned qi = in.op == Op::VioSend ? pvio::kNetTx : in.queue;
      const auto* q = queue_of(port, in.dev, qi);
      if (!q)
        return StepOutcome::abort("driver macro names a missing device queue");
      auto& gmem = port.gpa_access();
      std::optional<Fault> f;
      Access acc = Access::Write;
      switch (in.op) {
        case Op::VioPost: f = vio_post(cpu, gmem, *q, in.dev, in.queue, static_cast<std::uint16_t>(in.imm)); break;
        case Op::VioReap: f = vio_reap(cpu, gmem, *q, in.dev, in.queue); break;
        case Op::VioSend: f = vio_send(cpu, gmem, *q, static_cast<std::uint32_t>(in.imm)); break;
        default: f = vio_blk(cpu, gmem, *q, in.write, static_cast<std::uint64_t>(in.imm),
                             static_cast<std::uint32_t>(in.addr));
      }
      if (f) {
        // Probes go read-then-write, so a stage-2 miss on a ring page is
        // reported as a load fault; either way the handler maps the page.
        if (f->kind == FaultKind::S2PageFault)
          acc = Access::Read;
        return from_fault(*f, acc);
      }
      break;
    }
  }
  cpu.pc = next;
  ++cpu.retired;
  return StepOutcome::retired();
}

} // namespace duvisor::guest
