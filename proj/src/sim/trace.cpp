#include "duvisor/sim/trace.hpp"

#include <array>
#include <cstdio>
#include <stdexcept>

namespace duvisor::sim {

namespace {

constexpr std::array<std::string_view, kEventKindCount> kKindNames = {
  "VM_EXIT",   "VM_ENTRY",   "DISPATCH",   "PAGE_ALLOC",  "S2_MAP",      "S2_NODE_ALLOC",
  "MMIO_EMUL", "INSERT",     "UIPI_SEND",  "UIPI_LATCH",  "IRQ_ACK",     "KICK",
  "BACKEND_RX", "BACKEND_TX", "BACKEND_BLK", "CONTROL",    "BOOT_DONE",   "GUEST_HALT",
  "GUEST_ABORT", "PANIC",     "KILL",
};

constexpr std::array<std::string_view, kHandlerCount> kHandlerNames = {
  "-",
  "hypercall.null",
  "hypercall.vipi",
  "hypercall.halt",
  "hypercall.unknown",
  "s2pf",
  "mmio",
  "wfi",
  "uipi",
  "insert.vipi",
  "insert.device",
  "entry.huret",
  "entry.hs",
  "exit.hu",
  "exit.hs",
  "ctl.spawn",
  "ctl.enable_dv",
  "ctl.alloc_region",
  "ctl.set_s2pt_root",
  "ctl.dispatch",
  "ctl.timer",
  "ctl.pmc_fault",
  "ctl.illegal",
  "ctl.uipi_fault",
};

} // namespace

std::string_view to_string(EventKind k)
{
  return kKindNames.at(static_cast<std::size_t>(k));
}

std::string_view to_string(Handler h)
{
  return kHandlerNames.at(static_cast<std::size_t>(h));
}

std::uint32_t Trace::emit(const TraceEvent& e)
{
  if (events_.size() >= kNoLink)
    throw std::length_error("trace too long");
  events_.push_back(e);
  return static_cast<std::uint32_t>(events_.size() - 1);
}

std::optional<std::uint32_t> Trace::boot_done(std::uint16_t pid) const
{
  for (std::size_t i = 0; i < events_.size(); ++i)
    if (events_[i].kind == EventKind::BootDone && events_[i].pid == pid)
      return static_cast<std::uint32_t>(i);
  return std::nullopt;
}

std::string Trace::to_csv() const
{
  std::string out = "seq,cycle,core,pid,vmid,vcpuid,kind,mode,reason,handler,info,link,origin\n";
  out.reserve(out.size() + events_.size() * 72);
  char line[256];
  for (std::size_t i = 0; i < events_.size(); ++i) {
    const auto& e = events_[i];
    const std::string_view reason =
        e.kind == EventKind::VmExit ? hw::to_string(static_cast<hw::ExitReason>(e.reason)) : "-";
    const long long link = e.link == kNoLink ? -1 : static_cast<long long>(e.link);
    const long long origin = e.origin == kNoLink ? -1 : static_cast<long long>(e.origin);
    std::snprintf(line, sizeof line, "%zu,%llu,%u,%u,%u,%u,%.*s,%.*s,%.*s,%.*s,0x%llx,%lld,%lld\n", i,
                  static_cast<unsigned long long>(e.cycle), e.core, e.pid, e.vmid, e.vcpuid,
                  static_cast<int>(to_string(e.kind).size()), to_string(e.kind).data(),
                  static_cast<int>(hw::to_string(e.mode).size()), hw::to_string(e.mode).data(),
                  static_cast<int>(reason.size()), reason.data(),
                  static_cast<int>(to_string(e.handler).size()), to_string(e.handler).data(),
                  static_cast<unsigned long long>(e.info), link, origin);
    out += line;
  }
  return out;
}

std::uint64_t Trace::digest() const
{
  std::uint64_t h = kFnvOffset;
  for (const auto& e : events_) {
    // Field by field so struct padding never leaks into the digest.
    const std::uint64_t words[] = {
      e.cycle,
      e.info,
      (std::uint64_t{e.core} << 48) | (std::uint64_t{e.pid} << 32) | (std::uint64_t{e.vmid} << 16) |
          e.vcpuid,
      (std::uint64_t(e.kind) << 24) | (std::uint64_t(e.mode) << 16) | (std::uint64_t(e.reason) << 8) |
          std::uint64_t(e.handler),
      (std::uint64_t{e.link} << 32) | e.origin,
    };
    h = fnv1a(words, sizeof words, h);
  }
  return h;
}

} // namespace duvisor::sim
