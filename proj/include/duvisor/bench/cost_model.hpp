#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include "duvisor/hw/types.hpp"

namespace duvisor::bench {

inline constexpr const char* kCostModelFormat = "duvisor-cost-model/1";

/// A trace needs a segment the model does not define.
class PricingError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

struct Segment
{
  double cycles = 0;
  /// Breakdown bucket used by the stacked text report.
  std::string group;
  /// Where the number comes from.
  std::string source;

  bool operator==(const Segment&) const = default;
};

class CostModel
{
public:
  std::string name = "custom";
  std::map<std::string, Segment> segments;

  /// The calibrated default table.
  static CostModel defaults();
  static CostModel parse(const std::string& json_text);
  static CostModel load(const std::filesystem::path& path);
  std::string to_json() const;

  double cost(const std::string& segment) const;
  bool has(const std::string& segment) const { return segments.count(segment) != 0; }
  /// Every entry multiplied by `k`.
  CostModel scaled(double k) const;

  bool operator==(const CostModel&) const = default;
};

} // namespace duvisor::bench
