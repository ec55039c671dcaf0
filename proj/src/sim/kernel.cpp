#include "duvisor/sim/kernel.hpp"

#include <algorithm>
#include <stdexcept>

namespace duvisor::sim {

using hw::CoreId;
using hw::Mode;

void Actor::on_guest_trap(CoreId core, const hw::TrapEvent&)
{
  throw std::logic_error("unexpected guest trap on core " + std::to_string(core));
}

Kernel::Kernel(KernelConfig cfg)
  : cfg_(cfg),
    machine_(cfg.cores),
    mem_(kHostRamBase, cfg.host_ram),
    cp_(machine_, mem_, trace_, cfg.cp),
    rng_(cfg.seed),
    next_tick_(cfg.cores, cfg.timer_period)
{
  cp_.set_clock(&cycle_);
  cp_.set_guest_trap_hook([this](CoreId core, const hw::TrapEvent& trap) {
    if (Actor* a = actor_on(core))
      a->on_guest_trap(core, trap);
  });
  mem_.set_observer([this](const mmu::MemAccess& a) { observe(a); });
}

void Kernel::add_actor(cp::Tid tid, Actor* actor)
{
  actors_[tid] = actor;
}

std::uint32_t Kernel::emit(TraceEvent e)
{
  e.cycle = cycle_;
  return trace_.emit(e);
}

mmu::WalkContext Kernel::walk_context(CoreId core)
{
  return mmu::WalkContext{machine_.core(core).pmc, mem_, [this](std::uint64_t, std::uint64_t, bool ok) {
                            ++stats_.pmc_checks;
                            if (!ok)
                              ++stats_.pmc_denials;
                          }};
}

void Kernel::observe(const mmu::MemAccess& a)
{
  if (a.origin != mmu::Origin::Guest)
    return;
  const auto owner = cp_.grant_owner(a.hpa, a.len);
  if (!owner || !current_pid_ || *owner != *current_pid_)
    escapes_.push_back(Escape{cycle_, current_pid_.value_or(0), a.hpa, a.len});
}

Actor* Kernel::actor_on(CoreId core) const
{
  const auto tid = cp_.resident(core);
  if (!tid)
    return nullptr;
  const auto& t = cp_.thread(*tid);
  if (!t.alive || !cp_.alive(t.pid))
    return nullptr;
  auto it = actors_.find(*tid);
  return it == actors_.end() ? nullptr : it->second;
}

bool Kernel::core_active(CoreId core) const
{
  const Actor* a = actor_on(core);
  if (a && !a->done())
    return true;
  // Queued threads only matter when a tick can rotate them in.
  if (cfg_.timer_period == 0 || cp_.queued(core) == 0)
    return false;
  for (const auto& [tid, actor] : actors_) {
    const auto& t = cp_.thread(tid);
    if (t.core == core && t.alive && cp_.alive(t.pid) && !actor->done())
      return true;
  }
  return false;
}

void Kernel::fire_timer(CoreId core)
{
  ++stats_.timer_ticks;
  auto& c = machine_.core(core);
  const Mode interrupted = c.mode;
  if (interrupted == Mode::HS) {
    cp_.on_timer(core, Mode::HS);
    return;
  }
  const auto trap = machine_.route_trap(core, hw::ExitReason::Timer, 0);
  if (interrupted == Mode::V) {
    TraceEvent e;
    e.kind = EventKind::VmExit;
    e.mode = Mode::V;
    e.core = static_cast<std::uint16_t>(core);
    e.pid = static_cast<std::uint16_t>(c.owner);
    e.vmid = static_cast<std::uint16_t>(c.regs.h_vmid);
    e.vcpuid = static_cast<std::uint16_t>(c.regs.hu_vcpuid);
    e.reason = static_cast<std::uint8_t>(trap.reason);
    e.handler = Handler::ExitToHs;
    emit(e);
  }
  cp_.on_timer(core, interrupted);
}

RunStats Kernel::run()
{
  const std::size_t n = machine_.core_count();
  std::vector<bool> stalled(n, false);
  std::vector<CoreId> ready;
  std::size_t rr = 0;
  stats_.completed = false;

  for (;;) {
    if (stats_.steps >= cfg_.max_steps) {
      stats_.stop_reason = "step budget exhausted";
      break;
    }
    ready.clear();
    bool any_active = false;
    for (CoreId c = 0; c < n; ++c) {
      if (!core_active(c))
        continue;
      any_active = true;
      if (!stalled[c])
        ready.push_back(c);
    }
    if (!any_active) {
      stats_.completed = true;
      stats_.stop_reason = "all actors done";
      break;
    }
    if (ready.empty()) {
      // Quiescent: skip ahead to the next thing that can happen by itself.
      std::optional<std::uint64_t> next;
      auto consider = [&](std::uint64_t t) { next = next ? std::min(*next, t) : t; };
      for (const auto& [tid, actor] : actors_) {
        const auto& t = cp_.thread(tid);
        if (t.alive && cp_.alive(t.pid) && !actor->done())
          if (auto w = actor->wake_at())
            consider(std::max(*w, cycle_));
      }
      if (cfg_.timer_period != 0)
        for (CoreId c = 0; c < n; ++c)
          if (core_active(c))
            consider(std::max(next_tick_[c], cycle_));
      if (!next) {
        stats_.stop_reason = "deadlock: every actor idle with nothing scheduled";
        break;
      }
      if (*next > cycle_) {
        cycle_ = *next;
        ++stats_.clock_jumps;
      }
      std::fill(stalled.begin(), stalled.end(), false);
      continue;
    }

    CoreId core;
    if (cfg_.interleave == Interleave::Random) {
      core = ready[rng_() % ready.size()];
    } else {
      core = ready[rr % ready.size()];
      ++rr;
    }

    bool progress = false;
    if (cfg_.timer_period != 0 && cycle_ >= next_tick_[core]) {
      while (next_tick_[core] <= cycle_)
        next_tick_[core] += cfg_.timer_period;
      current_pid_.reset();
      fire_timer(core);
      progress = true;
    } else if (Actor* a = actor_on(core)) {
      current_pid_ = cp_.thread(*cp_.resident(core)).pid;
      progress = a->step(core);
      current_pid_.reset();
    }
    ++stats_.steps;
    ++cycle_;
    if (progress)
      std::fill(stalled.begin(), stalled.end(), false);
    else
      stalled[core] = true;
  }
  stats_.cycles = cycle_;
  return stats_;
}

} // namespace duvisor::sim
