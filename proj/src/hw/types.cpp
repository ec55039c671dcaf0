#include "duvisor/hw/types.hpp"

#include <array>

namespace duvisor::hw {

namespace {

constexpr std::array<std::string_view, kExitReasonCount> kReasonNames = {
  "S2PF_LOAD", "S2PF_STORE", "S2PF_FETCH", "SENSITIVE_WFI", "HYPERCALL",
  "UIPI",      "TIMER",      "PMC_FAULT",  "ILLEGAL_HU_ACCESS",
};

constexpr std::array<std::string_view, kRegCount> kRegNames = {
  "hu_er", "hu_einfo", "hu_vitr", "hu_vpc", "hu_ehb", "hu_vcpuid", "h_enable", "h_deleg", "h_vmid",
};

} // namespace

std::string_view to_string(Mode m)
{
  switch (m) {
    case Mode::HS: return "HS";
    case Mode::HU: return "HU";
    case Mode::V: return "V";
  }
  return "?";
}

std::string_view to_string(ExitReason r)
{
  return kReasonNames.at(static_cast<std::size_t>(r));
}

std::string_view to_string(Reg r)
{
  return kRegNames.at(static_cast<std::size_t>(r));
}

std::string_view to_string(Destination d)
{
  switch (d) {
    case Destination::HuHandler: return "HU_HANDLER";
    case Destination::HsHandler: return "HS_HANDLER";
    case Destination::GuestHandler: return "GUEST_HANDLER";
  }
  return "?";
}

std::optional<Reg> reg_from_string(std::string_view name)
{
  for (std::size_t i = 0; i < kRegNames.size(); ++i)
    if (kRegNames[i] == name)
      return static_cast<Reg>(i);
  return std::nullopt;
}

std::optional<ExitReason> exit_reason_from_string(std::string_view name)
{
  for (std::size_t i = 0; i < kReasonNames.size(); ++i)
    if (kReasonNames[i] == name)
      return static_cast<ExitReason>(i);
  return std::nullopt;
}

} // namespace duvisor::hw
