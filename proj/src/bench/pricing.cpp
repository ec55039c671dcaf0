#include "duvisor/bench/pricing.hpp"

#include <array>

namespace duvisor::bench {

using sim::EventKind;
using sim::Handler;
using sim::kNoLink;
using sim::TraceEvent;

namespace {

using Route = std::span<const std::string_view>;

constexpr std::array<std::string_view, 0> kNothing{};
constexpr std::array<std::string_view, 1> kHuExit{"v_to_hu_exit"};
constexpr std::array<std::string_view, 1> kHsExit{"v_to_hs_exit"};
constexpr std::array<std::string_view, 1> kHuEntry{"hu_to_v_entry"};
constexpr std::array<std::string_view, 1> kHsEntry{"hs_to_v_entry"};
constexpr std::array<std::string_view, 1> kHcallKvm{"hypercall_handle_kvm"};
constexpr std::array<std::string_view, 1> kHcallDuv{"hypercall_handle_duv"};
constexpr std::array<std::string_view, 1> kFaultOther{"kvm_fault_other"};
constexpr std::array<std::string_view, 1> kWfi{"wfi_handle"};
constexpr std::array<std::string_view, 1> kKick{"kick_handle"};
constexpr std::array<std::string_view, 1> kAllocKvm{"kvm_alloc"};
constexpr std::array<std::string_view, 1> kAllocDuv{"duv_alloc"};
constexpr std::array<std::string_view, 1> kMap{"s2pt_map"};
constexpr std::array<std::string_view, 3> kMmioKvm{"hs_hu_transfer", "mmio_emul_kvm", "hs_hu_transfer"};
constexpr std::array<std::string_view, 1> kMmioDuv{"mmio_emul_duv"};
constexpr std::array<std::string_view, 1> kVipiKvm{"vipi_insert_kvm"};
constexpr std::array<std::string_view, 1> kVipiDuv{"vipi_insert_uipi"};
constexpr std::array<std::string_view, 3> kDevKvm{"syscall_switch", "eventfd_notify", "irqchip_emul"};
constexpr std::array<std::string_view, 2> kDevDuv{"uipi_notify", "irqchip_emul"};
constexpr std::array<std::string_view, 1> kVirqKvm{"virq_handle_kvm"};
constexpr std::array<std::string_view, 1> kVirqDuv{"virq_handle_duv"};
constexpr std::array<std::string_view, 1> kControl{"cp_control"};

Route pick(Arch a, Route kvm, Route duv)
{
  return a == Arch::Kvm ? kvm : duv;
}

} // namespace

std::string_view to_string(Arch a)
{
  return a == Arch::Kvm ? "kvm" : "duvisor";
}

Route route(Arch a, const TraceEvent& e)
{
  switch (e.kind) {
    case EventKind::VmExit:
      return e.handler == Handler::ExitToHu ? pick(a, kHsExit, kHuExit) : Route(kHsExit);
    case EventKind::VmEntry:
      return e.handler == Handler::EntryHuret ? pick(a, kHsEntry, kHuEntry) : Route(kHsEntry);
    case EventKind::Dispatch:
      switch (e.handler) {
        case Handler::HypercallNull:
        case Handler::HypercallHalt:
        case Handler::HypercallUnknown: return pick(a, kHcallKvm, kHcallDuv);
        case Handler::HypercallVipi: return kNothing;
        case Handler::S2pf: return pick(a, kFaultOther, kNothing);
        case Handler::Mmio: return kNothing;
        case Handler::Wfi: return kWfi;
        case Handler::Uipi: return kKick;
        default: break;
      }
      throw PricingError("dispatch event with no handler route");
    case EventKind::PageAlloc: return pick(a, kAllocKvm, kAllocDuv);
    case EventKind::S2Map: return kMap;
    case EventKind::MmioEmul: return pick(a, kMmioKvm, kMmioDuv);
    case EventKind::Insert:
      return e.handler == Handler::InsertVipi ? pick(a, kVipiKvm, kVipiDuv) : pick(a, kDevKvm, kDevDuv);
    case EventKind::IrqAck: return pick(a, kVirqKvm, kVirqDuv);
    case EventKind::Control: return kControl;
    case EventKind::S2NodeAlloc:
    case EventKind::UipiSend:
    case EventKind::UipiLatch:
    case EventKind::Kick:
    case EventKind::BackendRx:
    case EventKind::BackendTx:
    case EventKind::BackendBlk:
    case EventKind::BootDone:
    case EventKind::GuestHalt:
    case EventKind::GuestAbort:
    case EventKind::Panic:
    case EventKind::Kill: return kNothing;
  }
  throw PricingError("event kind with no route");
}

double event_cost(const TraceEvent& e, const CostModel& model, Arch arch)
{
  double c = 0;
  for (auto seg : route(arch, e))
    c += model.cost(std::string(seg));
  return c;
}

Priced price(const sim::Trace& trace, const CostModel& model, Arch arch, const std::vector<bool>& mask)
{
  // Resolve each segment once; the trace can hold millions of events.
  std::map<std::string_view, std::pair<double, std::uint64_t>> acc;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    if (!mask.empty() && !mask[i])
      continue;
    for (auto seg : route(arch, trace[i]))
      ++acc[seg].second;
  }
  Priced p;
  for (auto& [seg, v] : acc) {
    const std::string name(seg);
    const double c = model.cost(name) * static_cast<double>(v.second);
    p.cycles[name] = c;
    p.counts[name] = v.second;
    p.total += c;
  }
  return p;
}

std::string_view to_string(Measure m)
{
  switch (m) {
    case Measure::None: return "none";
    case Measure::Hypercall: return "hypercall";
    case Measure::S2pf: return "s2pf";
    case Measure::Mmio: return "mmio";
    case Measure::Vipi: return "vipi";
    case Measure::IoNotify: return "io_notify";
  }
  return "?";
}

std::optional<Measure> measure_from_string(std::string_view s)
{
  for (auto m : {Measure::None, Measure::Hypercall, Measure::S2pf, Measure::Mmio, Measure::Vipi, Measure::IoNotify})
    if (to_string(m) == s)
      return m;
  return std::nullopt;
}

Attribution attribute(const sim::Trace& trace, Measure m)
{
  const std::size_t n = trace.size();
  Attribution a;
  a.measured.assign(n, false);
  if (m == Measure::None)
    return a;

  // Children of each exit, in trace order.
  std::vector<std::vector<std::uint32_t>> linked(n);
  std::vector<std::uint32_t> delivering_entry(n, kNoLink);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto& e = trace[i];
    if (e.link != kNoLink && e.link < n)
      linked[e.link].push_back(i);
    if (e.kind == EventKind::VmEntry && e.origin != kNoLink && e.origin < n)
      delivering_entry[e.origin] = i;
  }
  auto dispatch_of = [&](std::uint32_t exit) -> const TraceEvent* {
    for (auto c : linked[exit])
      if (trace[c].kind == EventKind::Dispatch)
        return &trace[c];
    return nullptr;
  };

  for (std::uint32_t i = 0; i < n; ++i) {
    const auto& e = trace[i];
    switch (m) {
      case Measure::Hypercall:
      case Measure::S2pf:
      case Measure::Mmio: {
        if (e.kind != EventKind::VmExit)
          break;
        const auto* d = dispatch_of(i);
        const Handler want = m == Measure::Hypercall ? Handler::HypercallNull
                             : m == Measure::S2pf    ? Handler::S2pf
                                                     : Handler::Mmio;
        if (!d || d->handler != want)
          break;
        ++a.ops;
        a.measured[i] = true;
        for (auto c : linked[i])
          a.measured[c] = true;
        break;
      }
      case Measure::Vipi: {
        if (e.kind != EventKind::Dispatch || e.handler != Handler::HypercallVipi || e.link == kNoLink)
          break;
        ++a.ops;
        a.measured[i] = true;
        a.measured[e.link] = true;
        for (auto c : linked[e.link]) {
          if (trace[c].kind != EventKind::Insert)
            continue;
          a.measured[c] = true;
          if (delivering_entry[c] != kNoLink)
            a.measured[delivering_entry[c]] = true;
        }
        break;
      }
      case Measure::IoNotify: {
        if (e.kind != EventKind::IrqAck || e.origin == kNoLink || e.origin >= n)
          break;
        const auto& ins = trace[e.origin];
        if (ins.kind != EventKind::Insert || ins.handler != Handler::InsertDevice)
          break;
        ++a.ops;
        a.measured[i] = true;
        a.measured[e.origin] = true;
        break;
      }
      case Measure::None: break;
    }
  }
  return a;
}

} // namespace duvisor::bench
