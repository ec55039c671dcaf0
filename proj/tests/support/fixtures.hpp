#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "duvisor/bench/scenario.hpp"
#include "duvisor/hv/hypervisor.hpp"
#include "duvisor/sim/kernel.hpp"

namespace duvisor::testing {

inline const std::vector<std::string> kScenarios = {"hypercall", "s2pf", "mmio", "vipi", "io_notify"};

std::filesystem::path source_dir();
std::filesystem::path scenario_path(const std::string& name);
bench::Scenario scenario(const std::string& name);

bench::RunResult run_named(const std::string& name, std::uint64_t seed, std::uint64_t reps,
                           const bench::CostModel& model = bench::CostModel::defaults());

/// A kernel with one VM built from assembly source. `tweak` edits the VM
/// config before boot.
struct MiniVm
{
  explicit MiniVm(const std::string& source, const std::function<void(hv::VmConfig&)>& tweak = {},
                  sim::KernelConfig kc = small_kernel());

  static sim::KernelConfig small_kernel();

  sim::RunStats run() { return kernel->run(); }
  hv::Hypervisor& vm() { return *hv; }
  const sim::Trace& trace() const { return kernel->trace(); }

  std::unique_ptr<sim::Kernel> kernel;
  std::unique_ptr<hv::Hypervisor> hv;
};

std::size_t count(const sim::Trace& t, sim::EventKind kind);
std::size_t count(const sim::Trace& t, sim::EventKind kind, sim::Handler h);
/// Events of `kind` as a list of their trace indices.
std::vector<std::uint32_t> find(const sim::Trace& t, sim::EventKind kind);
/// Compact "Kind[/Handler]" rendering of the trace, skipping Control events.
std::vector<std::string> shape(const sim::Trace& t, std::uint16_t pid);

} // namespace duvisor::testing
