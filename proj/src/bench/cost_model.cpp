#include "duvisor/bench/cost_model.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace duvisor::bench {

using nlohmann::json;

CostModel CostModel::defaults()
{
  CostModel m;
  m.name = "default";
  auto add = [&](const char* n, double c, const char* g, const char* s) { m.segments[n] = Segment{c, g, s}; };
  add("v_to_hu_exit", 210, "switch", "VM exit, same hardware cost whichever mode takes it");
  add("v_to_hs_exit", 210, "switch", "VM exit into the kernel (MMIO read breakdown, entry/exit row)");
  add("hu_to_v_entry", 170, "switch", "VM entry, same hardware cost whichever mode issues it");
  add("hs_to_v_entry", 170, "switch", "VM entry from the kernel (MMIO read breakdown, entry/exit row)");
  add("hypercall_handle_kvm", 359, "handler", "assumed split; only the 26.12% improvement is published");
  add("hypercall_handle_duv", 166, "handler", "assumed split; only the 26.12% improvement is published");
  add("kvm_alloc", 2939, "allocation", "memslot lookup plus page allocation, 57.32% of the fault path");
  add("kvm_fault_other", 1032, "fault-other", "rest of the kernel fault path, 20.13% of 5127");
  add("s2pt_map", 776, "mapping", "stage-2 entry install; 5127 - 2939 - 1032 - 210 - 170");
  add("duv_alloc", 336, "allocation", "bump allocation; 1492 - 776 - 210 - 170 after the 3635 saving");
  add("hs_hu_transfer", 1475, "transfer", "one kernel/user crossing; two make 2950 = 58.17% of 5071");
  add("mmio_emul_kvm", 1741, "emulation", "user-space device model; 5071 - 2950 - 210 - 170");
  add("mmio_emul_duv", 713, "emulation", "in-process device model; 5071 - 3978 - 210 - 170");
  add("vipi_insert_kvm", 4632, "insert", "5012 - 210 - 170, where 5012 = 3914 / 0.7809");
  add("vipi_insert_uipi", 718, "insert", "5012 - 3914 - 210 - 170");
  add("syscall_switch", 964, "notify", "assumed: irqfd write syscall entry and return");
  add("eventfd_notify", 11874, "notify", "9371 / 0.7892");
  add("uipi_notify", 2503, "notify", "11874 - 9371");
  add("irqchip_emul", 1384, "irqchip", "assumed: shared by both paths; fills the 17914-cycle total");
  add("virq_handle_kvm", 14140, "virq", "7579 / 0.536");
  add("virq_handle_duv", 6561, "virq", "14140 - 7579");
  add("wfi_handle", 150, "handler", "assumed; background only");
  add("kick_handle", 150, "handler", "assumed; background only");
  add("cp_control", 2000, "control", "assumed; control-plane calls, boot and scheduling only");
  return m;
}

CostModel CostModel::parse(const std::string& text)
{
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("cost model is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != kCostModelFormat)
    throw ConfigError(std::string("cost model must carry format \"") + kCostModelFormat + "\"");
  CostModel m;
  m.name = j.value("name", "custom");
  if (!j.contains("segments") || !j["segments"].is_object())
    throw ConfigError("cost model has no segments object");
  for (const auto& [name, v] : j["segments"].items()) {
    Segment s;
    if (v.is_number()) {
      s.cycles = v.get<double>();
    } else if (v.is_object() && v.contains("cycles") && v["cycles"].is_number()) {
      s.cycles = v["cycles"].get<double>();
      s.group = v.value("group", "");
      s.source = v.value("source", "");
    } else {
      throw ConfigError("segment " + name + " needs a numeric cycles value");
    }
    if (!(s.cycles >= 0))
      throw ConfigError("segment " + name + " has a negative cost");
    if (s.group.empty())
      s.group = name;
    m.segments[name] = s;
  }
  return m;
}

CostModel CostModel::load(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open cost model " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string CostModel::to_json() const
{
  json j;
  j["format"] = kCostModelFormat;
  j["name"] = name;
  j["segments"] = json::object();
  for (const auto& [n, s] : segments)
    j["segments"][n] = {{"cycles", s.cycles}, {"group", s.group}, {"source", s.source}};
  return j.dump(2) + "\n";
}

double CostModel::cost(const std::string& segment) const
{
  auto it = segments.find(segment);
  if (it == segments.end())
    throw PricingError("cost model has no segment \"" + segment + "\"");
  return it->second.cycles;
}

CostModel CostModel::scaled(double k) const
{
  CostModel m = *this;
  for (auto& [_, s] : m.segments)
    s.cycles *= k;
  return m;
}

} // namespace duvisor::bench
