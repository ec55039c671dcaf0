#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "duvisor/cp/cp_driver.hpp"
#include "duvisor/hw/machine.hpp"
#include "duvisor/mmu/phys_mem.hpp"
#include "duvisor/mmu/translate.hpp"
#include "duvisor/sim/trace.hpp"

namespace duvisor::sim {

/// A schedulable piece of user-level hypervisor code bound to one thread.
class Actor
{
public:
  virtual ~Actor() = default;
  /// Runs one step on `core`, where the actor's thread is resident. Returns
  /// whether anything changed.
  virtual bool step(hw::CoreId core) = 0;
  /// True once the actor has nothing left to do, ever.
  virtual bool done() const = 0;
  /// Earliest cycle at which an idle actor may have work again.
  virtual std::optional<std::uint64_t> wake_at() const { return std::nullopt; }
  /// A trap raised on the actor's core while the kernel was resuming it.
  virtual void on_guest_trap(hw::CoreId core, const hw::TrapEvent& trap);
};

enum class Interleave : std::uint8_t { Random, RoundRobin };

struct KernelConfig
{
  std::size_t cores = 8;
  std::uint64_t host_ram = 16ull << 30;
  /// Cycles between timer ticks on each core; 0 disables the timer.
  std::uint64_t timer_period = 0;
  Interleave interleave = Interleave::Random;
  std::uint64_t seed = 1;
  std::uint64_t max_steps = 200'000'000;
  cp::CpConfig cp{};
};

/// A guest-origin access that landed outside the issuing process's grants.
struct Escape
{
  std::uint64_t cycle = 0;
  cp::Pid pid = 0;
  std::uint64_t hpa = 0;
  std::uint64_t len = 0;
};

struct RunStats
{
  bool completed = false;
  std::uint64_t steps = 0;
  std::uint64_t cycles = 0;
  std::uint64_t clock_jumps = 0;
  std::uint64_t timer_ticks = 0;
  std::uint64_t pmc_checks = 0;
  std::uint64_t pmc_denials = 0;
  std::string stop_reason;
};

/// Host RAM starts here in the simulated physical address map.
inline constexpr std::uint64_t kHostRamBase = 0x1'0000'0000ull;

/// The single-threaded simulation kernel: owns the machine, host memory, the
/// control plane and the trace, and decides which core steps next.
class Kernel
{
public:
  explicit Kernel(KernelConfig cfg);
  Kernel(const Kernel&) = delete;
  Kernel& operator=(const Kernel&) = delete;

  hw::Machine& machine() { return machine_; }
  mmu::PhysicalMemory& memory() { return mem_; }
  Trace& trace() { return trace_; }
  cp::CpDriver& cp() { return cp_; }
  const KernelConfig& config() const { return cfg_; }
  std::uint64_t cycle() const { return cycle_; }

  void add_actor(cp::Tid tid, Actor* actor);

  /// Walk context for V-derived accesses issued on `core`.
  mmu::WalkContext walk_context(hw::CoreId core);

  /// Emits with the current cycle filled in.
  std::uint32_t emit(TraceEvent e);

  /// Runs until every live actor is done, nothing can ever move again, or
  /// the step budget is spent.
  RunStats run();

  const std::vector<Escape>& escapes() const { return escapes_; }
  const RunStats& stats() const { return stats_; }

private:
  Actor* actor_on(hw::CoreId core) const;
  bool core_active(hw::CoreId core) const;
  void fire_timer(hw::CoreId core);
  void observe(const mmu::MemAccess& a);

  KernelConfig cfg_;
  hw::Machine machine_;
  mmu::PhysicalMemory mem_;
  Trace trace_;
  cp::CpDriver cp_;
  std::uint64_t cycle_ = 0;
  std::mt19937_64 rng_;
  std::unordered_map<cp::Tid, Actor*> actors_;
  std::vector<std::uint64_t> next_tick_;
  std::optional<cp::Pid> current_pid_;
  std::vector<Escape> escapes_;
  RunStats stats_;
};

} // namespace duvisor::sim
