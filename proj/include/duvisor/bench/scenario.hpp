#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "duvisor/bench/cost_model.hpp"
#include "duvisor/bench/pricing.hpp"
#include "duvisor/bench/report.hpp"
#include "duvisor/hv/hypervisor.hpp"
#include "duvisor/sim/kernel.hpp"

namespace duvisor::bench {

inline constexpr const char* kScenarioFormat = "duvisor-scenario/1";

struct PacketPlan
{
  bool enabled = false;
  /// Schedule file; generated from the fields below when empty.
  std::filesystem::path file;
  /// 0 means repetitions plus a small tail, so late coalescing cannot starve
  /// the guest of wake-ups.
  std::uint64_t count = 0;
  std::uint64_t start = 10'000;
  std::uint64_t spacing = 2'000;
  std::uint32_t min_len = 64;
  std::uint32_t max_len = 1'500;
};

struct VmSpec
{
  hv::VmConfig config;
  /// "canned:<name>" or a path relative to the scenario file.
  std::string guest;
  PacketPlan packets;
  std::uint64_t disk_sectors = 0;
};

struct Scenario
{
  std::string name;
  Measure measure = Measure::None;
  std::uint64_t repetitions = 100'000;
  std::uint64_t timer_period = 0;
  std::size_t cores = 8;
  std::uint64_t host_ram = 16ull << 30;
  sim::Interleave interleave = sim::Interleave::Random;
  std::vector<VmSpec> vms;
  std::filesystem::path base_dir;
};

/// Parses sizes such as 4096, "64K", "512M", "16G".
std::uint64_t parse_size(const std::string& s);

Scenario parse_scenario(const std::string& json_text, const std::filesystem::path& base_dir = {});
Scenario load_scenario(const std::filesystem::path& path);

/// Assembles a VM's guest with $REPS and $ROUNDS filled in.
guest::Program load_guest(const Scenario& s, const VmSpec& vm);

struct ExitRecord
{
  std::uint64_t cycle = 0;
  std::uint16_t core = 0;
  std::uint16_t vmid = 0;
  std::uint16_t vcpuid = 0;
  std::string reason;
  std::uint64_t info = 0;
  std::string handler;
  double kvm_cycles = 0;
  double duv_cycles = 0;
};

std::string exit_log_csv(const std::vector<ExitRecord>& log);

struct VmOutcome
{
  std::string name;
  bool finished = false;
  bool alive = false;
  bool panicked = false;
  std::string exit_reason;
  std::vector<hv::VcpuStatus> vcpus;
};

struct RunResult
{
  BenchReport report;
  sim::Trace trace;
  sim::RunStats stats;
  std::vector<ExitRecord> exits;
  std::vector<VmOutcome> vms;
};

struct RunOptions
{
  std::optional<std::uint64_t> repetitions;
  bool keep_exit_log = true;
};

/// Builds report fields from a finished trace.
BenchReport make_report(const sim::Trace& trace, const CostModel& model, Measure measure);

RunResult run_scenario(const Scenario& s, const CostModel& model, std::uint64_t seed, const RunOptions& opts = {});

} // namespace duvisor::bench
