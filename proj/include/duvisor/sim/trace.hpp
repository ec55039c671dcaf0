#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "duvisor/hw/types.hpp"
#include "duvisor/util/hash.hpp"

namespace duvisor::sim {

enum class EventKind : std::uint8_t
{
  VmExit,
  VmEntry,
  Dispatch,
  PageAlloc,
  S2Map,
  S2NodeAlloc,
  MmioEmul,
  Insert,
  UipiSend,
  UipiLatch,
  IrqAck,
  Kick,
  BackendRx,
  BackendTx,
  BackendBlk,
  Control,
  BootDone,
  GuestHalt,
  GuestAbort,
  Panic,
  Kill,
};

inline constexpr std::size_t kEventKindCount = 21;

/// Sub-kind carried in TraceEvent::handler. Its meaning depends on `kind`:
/// the handler chosen for a Dispatch, the source of an Insert, how a VmEntry
/// was performed, the control-plane call for Control.
enum class Handler : std::uint8_t
{
  None,
  HypercallNull,
  HypercallVipi,
  HypercallHalt,
  HypercallUnknown,
  S2pf,
  Mmio,
  Wfi,
  Uipi,
  InsertVipi,
  InsertDevice,
  EntryHuret,
  EntryHs,
  ExitToHu,
  ExitToHs,
  CtlSpawn,
  CtlEnableDv,
  CtlAllocRegion,
  CtlSetS2Root,
  CtlDispatch,
  CtlTimer,
  CtlPmcFault,
  CtlIllegal,
  CtlUipiFault,
};

inline constexpr std::size_t kHandlerCount = 24;

inline constexpr std::uint32_t kNoLink = std::numeric_limits<std::uint32_t>::max();

/// One trace record. `link` ties handler work and the closing VmEntry to the
/// VmExit that started it; `origin` ties a delivering VmEntry or an IrqAck to
/// the Insert that raised the interrupt. Both are event indices.
struct TraceEvent
{
  std::uint64_t cycle = 0;
  std::uint64_t info = 0;
  std::uint16_t core = 0;
  std::uint16_t pid = 0;
  std::uint16_t vmid = 0;
  std::uint16_t vcpuid = 0;
  EventKind kind = EventKind::Control;
  hw::Mode mode = hw::Mode::HS;
  std::uint8_t reason = 0;
  Handler handler = Handler::None;
  std::uint32_t link = kNoLink;
  std::uint32_t origin = kNoLink;

  bool operator==(const TraceEvent&) const = default;
};

std::string_view to_string(EventKind k);
std::string_view to_string(Handler h);

class Trace
{
public:
  std::uint32_t emit(const TraceEvent& e);

  const std::vector<TraceEvent>& events() const { return events_; }
  std::size_t size() const { return events_.size(); }
  const TraceEvent& operator[](std::size_t i) const { return events_[i]; }
  TraceEvent& at(std::size_t i) { return events_.at(i); }

  /// Index of the BootDone event of the given process, if any.
  std::optional<std::uint32_t> boot_done(std::uint16_t pid) const;

  /// CSV, one line per event, with a header line.
  std::string to_csv() const;
  /// FNV-1a over the binary record stream; equal traces give equal digests.
  std::uint64_t digest() const;

  bool operator==(const Trace&) const = default;

private:
  std::vector<TraceEvent> events_;
};

} // namespace duvisor::sim
