#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "duvisor/guest/isa.hpp"
#include "duvisor/mmu/translate.hpp"
#include "duvisor/pvio/virtqueue.hpp"

namespace duvisor::guest {

struct LoopFrame
{
  std::uint32_t begin = 0;
  std::uint64_t remaining = 0;

  bool operator==(const LoopFrame&) const = default;
};

/// Guest driver bookkeeping for one virtqueue.
struct DriverQueue
{
  std::uint16_t next_avail = 0;
  std::uint16_t last_used = 0;
  std::uint32_t posted = 0;

  bool operator==(const DriverQueue&) const = default;
};

/// Architectural guest state of one vCPU plus what the guest itself keeps in
/// memory-less form (loop counters, driver indices, stage-1 pool cursor).
struct GuestCpu
{
  std::array<std::uint64_t, kRegs> regs{};
  std::uint64_t pc = kCodeBase;
  std::vector<LoopFrame> loops;
  std::optional<std::uint64_t> s1_root;
  std::uint64_t s1_pool_next = 0;
  std::uint64_t s1_pool_end = 0;
  std::map<std::pair<pvio::DeviceKind, std::uint8_t>, DriverQueue> queues;
  /// Per-packet checksums of what the guest pulled off the RX ring.
  std::vector<std::uint64_t> rx_checksums;
  /// RX descriptor ids in posting order.
  std::vector<std::uint16_t> rx_posted;
  std::uint64_t tx_sent = 0;
  std::uint64_t retired = 0;
  std::uint64_t s1_stub_maps = 0;

  void set(unsigned r, std::uint64_t v)
  {
    if (r != 0)
      regs[r] = v;
  }
  bool operator==(const GuestCpu&) const = default;
};

/// The guest's window onto the machine. Everything it touches is V-derived:
/// walks are stage-2 translated and PMC-checked by the implementation.
class GuestPort
{
public:
  virtual ~GuestPort() = default;
  virtual mmu::TranslateResult translate(std::optional<std::uint64_t> s1_root, std::uint64_t gva,
                                         mmu::Access access, std::uint64_t len) = 0;
  virtual mmu::TranslateResult translate_gpa(std::uint64_t gpa, mmu::Access access, std::uint64_t len) = 0;
  virtual pvio::GpaAccess& gpa_access() = 0;
  virtual mmu::PhysicalMemory& memory() = 0;
  /// Pending virtual interrupt lines of the running vCPU.
  virtual hw::Word& vip() = 0;
  virtual void irq_acked(unsigned irq) = 0;
  virtual const pvio::DeviceLayout* device(pvio::DeviceKind kind) const = 0;
};

struct StepOutcome
{
  enum class Kind : std::uint8_t { Retired, Exit, PmcFault, Abort };
  Kind kind = Kind::Retired;
  hw::ExitReason reason = hw::ExitReason::Hypercall;
  /// Exit info word, or the offending HPA for PmcFault.
  hw::Word info = 0;
  std::string message;

  static StepOutcome retired() { return {}; }
  static StepOutcome exit(hw::ExitReason r, hw::Word info) { return {Kind::Exit, r, info, {}}; }
  static StepOutcome pmc(hw::Word hpa) { return {Kind::PmcFault, hw::ExitReason::PmcFault, hpa, {}}; }
  static StepOutcome abort(std::string why) { return {Kind::Abort, hw::ExitReason::Hypercall, 0, std::move(why)}; }
};

/// Index of the instruction at `pc`, if it lies inside the program.
std::optional<std::uint32_t> instr_index(const Program& p, std::uint64_t pc);

/// Executes one instruction in V mode. Exits leave the PC on the trapping
/// instruction; the handler decides whether to advance it.
StepOutcome step(const Program& prog, GuestCpu& cpu, GuestPort& port);

/// Guest view of the stage-1 tables the in-guest stub maintains.
mmu::StageOnePageTable stage_one(const GuestCpu& cpu);

} // namespace duvisor::guest
