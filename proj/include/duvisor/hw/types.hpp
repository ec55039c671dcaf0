#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace duvisor {

/// Raised for invalid configuration or misuse of a control-plane API.
class ConfigError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

} // namespace duvisor

namespace duvisor::hw {

using Word = std::uint64_t;
using CoreId = std::uint32_t;

enum class Mode : std::uint8_t { HS, HU, V };

/// Exit reasons in encoding order; hu_er holds the underlying integer.
enum class ExitReason : std::uint8_t
{
  S2pfLoad,
  S2pfStore,
  S2pfFetch,
  SensitiveWfi,
  Hypercall,
  Uipi,
  Timer,
  PmcFault,
  IllegalHuAccess,
};

inline constexpr std::size_t kExitReasonCount = 9;

constexpr bool is_delegatable(ExitReason r)
{
  return r <= ExitReason::Uipi;
}

constexpr Word deleg_bit(ExitReason r)
{
  return Word{1} << static_cast<unsigned>(r);
}

inline constexpr Word kDelegValidMask = (Word{1} << kExitReasonCount) - 1;

/// Every delegatable reason set.
inline constexpr Word kDelegAll = deleg_bit(ExitReason::S2pfLoad) | deleg_bit(ExitReason::S2pfStore) |
                                  deleg_bit(ExitReason::S2pfFetch) |
                                  deleg_bit(ExitReason::SensitiveWfi) |
                                  deleg_bit(ExitReason::Hypercall) | deleg_bit(ExitReason::Uipi);

enum class Reg : std::uint8_t
{
  HuEr,
  HuEinfo,
  HuVitr,
  HuVpc,
  HuEhb,
  HuVcpuid,
  HEnable,
  HDeleg,
  HVmid,
};

inline constexpr std::size_t kRegCount = 9;

constexpr bool is_hs_only(Reg r)
{
  return r >= Reg::HEnable;
}

enum class Destination : std::uint8_t { HuHandler, HsHandler, GuestHandler };

struct TrapEvent
{
  CoreId core = 0;
  ExitReason reason = ExitReason::IllegalHuAccess;
  Word info = 0;
  Destination destination = Destination::HsHandler;

  bool operator==(const TrapEvent&) const = default;
};

std::string_view to_string(Mode m);
std::string_view to_string(ExitReason r);
std::string_view to_string(Reg r);
std::string_view to_string(Destination d);

std::optional<Reg> reg_from_string(std::string_view name);
std::optional<ExitReason> exit_reason_from_string(std::string_view name);

} // namespace duvisor::hw
