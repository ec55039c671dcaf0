#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "duvisor/bench/cost_model.hpp"

namespace duvisor::bench {

inline constexpr const char* kReportFormat = "duvisor-report/1";

/// Per-operation cost of one architecture's path.
struct ArchTotals
{
  std::map<std::string, double> per_op;
  double total = 0;
  /// Cycles of everything outside the measured operations, whole run.
  double background = 0;
  /// How often each segment is charged across the whole trace.
  std::map<std::string, std::uint64_t> charges;

  bool operator==(const ArchTotals&) const = default;
};

struct BenchReport
{
  std::string scenario;
  std::string measure;
  std::uint64_t seed = 0;
  std::uint64_t repetitions = 0;
  std::uint64_t ops = 0;
  bool completed = false;
  ArchTotals kvm;
  ArchTotals duv;
  double improvement_pct = 0;
  double saved_cycles = 0;
  std::map<std::string, std::uint64_t> exits_by_reason;
  std::uint64_t events = 0;
  std::string trace_digest;
  std::uint64_t steps = 0;
  std::uint64_t cycles = 0;
  CostModel model;

  bool operator==(const BenchReport&) const = default;
};

enum class Format : std::uint8_t { Csv, Json, Text };

Format format_from_string(const std::string& s);

std::string to_csv(const BenchReport& r);
std::string to_json(const BenchReport& r);
std::string to_text(const BenchReport& r);
std::string render(const BenchReport& r, Format f);
BenchReport report_from_json(const std::string& text);

/// Writes `content` to `path`, or to stdout for "-". Throws on I/O failure.
void write_output(const std::filesystem::path& path, const std::string& content);

} // namespace duvisor::bench
