#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "duvisor/bench/cost_model.hpp"
#include "duvisor/sim/trace.hpp"

namespace duvisor::bench {

/// The two ways the same trace is priced: the delegated user-level path as
/// simulated, and the kernel-mediated path modelled on top of it.
enum class Arch : std::uint8_t { Kvm, Duvisor };

std::string_view to_string(Arch a);

/// Segments charged for one event under `arch`, in path order.
std::span<const std::string_view> route(Arch arch, const sim::TraceEvent& e);

struct Priced
{
  std::map<std::string, double> cycles;
  std::map<std::string, std::uint64_t> counts;
  double total = 0;

  bool operator==(const Priced&) const = default;
};

/// Linear pricing of the events selected by `mask` (all when empty).
/// Throws PricingError if a routed segment is missing from the model.
Priced price(const sim::Trace& trace, const CostModel& model, Arch arch, const std::vector<bool>& mask = {});

/// Priced cost of a single event.
double event_cost(const sim::TraceEvent& e, const CostModel& model, Arch arch);

enum class Measure : std::uint8_t { None, Hypercall, S2pf, Mmio, Vipi, IoNotify };

std::string_view to_string(Measure m);
std::optional<Measure> measure_from_string(std::string_view s);

/// Which events make up the benchmarked operation, and how many operations
/// the trace holds. Everything not selected is background.
struct Attribution
{
  std::vector<bool> measured;
  std::uint64_t ops = 0;
};

Attribution attribute(const sim::Trace& trace, Measure m);

} // namespace duvisor::bench
