#include "duvisor/bench/scenario.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "duvisor/guest/canned.hpp"

namespace duvisor::bench {

using nlohmann::json;

std::uint64_t parse_size(const std::string& s)
{
  if (s.empty() || !std::isdigit(static_cast<unsigned char>(s[0])))
    throw ConfigError("bad size \"" + s + "\"");
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(s, &used, 0);
  } catch (const std::exception&) {
    throw ConfigError("bad size \"" + s + "\"");
  }
  const std::string unit = s.substr(used);
  unsigned shift = 0;
  if (unit == "K" || unit == "KiB")
    shift = 10;
  else if (unit == "M" || unit == "MiB")
    shift = 20;
  else if (unit == "G" || unit == "GiB")
    shift = 30;
  else if (!unit.empty())
    throw ConfigError("bad size unit in \"" + s + "\"");
  if (shift && v > (~std::uint64_t{0} >> shift))
    throw ConfigError("size overflows: \"" + s + "\"");
  return v << shift;
}

namespace {

std::uint64_t size_field(const json& j, const char* key, std::uint64_t fallback)
{
  if (!j.contains(key))
    return fallback;
  const auto& v = j[key];
  if (v.is_number_unsigned())
    return v.get<std::uint64_t>();
  if (v.is_string())
    return parse_size(v.get<std::string>());
  throw ConfigError(std::string("field \"") + key + "\" must be a size");
}

std::uint64_t uint_field(const json& j, const char* key, std::uint64_t fallback)
{
  if (!j.contains(key))
    return fallback;
  if (!j[key].is_number_unsigned())
    throw ConfigError(std::string("field \"") + key + "\" must be a non-negative integer");
  return j[key].get<std::uint64_t>();
}

std::vector<hw::CoreId> core_list(const json& j, const char* key)
{
  std::vector<hw::CoreId> out;
  if (!j.contains(key))
    return out;
  if (!j[key].is_array())
    throw ConfigError(std::string("pin.") + key + " must be an array of core numbers");
  for (const auto& c : j[key]) {
    if (!c.is_number_unsigned())
      throw ConfigError(std::string("pin.") + key + " must be an array of core numbers");
    out.push_back(c.get<hw::CoreId>());
  }
  return out;
}

VmSpec parse_vm(const json& j, std::size_t index)
{
  if (!j.is_object())
    throw ConfigError("each vms[] entry must be an object");
  VmSpec vm;
  auto& c = vm.config;
  c.name = j.value("name", "vm" + std::to_string(index));
  c.vcpus = static_cast<std::uint32_t>(uint_field(j, "vcpus", 1));
  c.memory = size_field(j, "memory", 64ull << 20);
  c.grant_size = size_field(j, "grant_size", 512ull << 20);
  c.initial_grants = static_cast<std::uint32_t>(uint_field(j, "initial_grants", 1));
  c.grant_extensions = static_cast<std::uint32_t>(uint_field(j, "grant_extensions", 1));
  c.premap = j.value("premap", false);
  if (!j.contains("guest") || !j["guest"].is_string())
    throw ConfigError("vm \"" + c.name + "\" needs a guest");
  vm.guest = j["guest"].get<std::string>();

  if (j.contains("devices")) {
    for (const auto& d : j["devices"]) {
      hv::DeviceConfig dc;
      const std::string kind = d.is_string() ? d.get<std::string>() : d.value("kind", "");
      auto k = pvio::device_from_string(kind);
      if (!k)
        throw ConfigError("unknown device \"" + kind + "\"");
      dc.kind = *k;
      if (d.is_object()) {
        dc.irq_vcpu = static_cast<std::uint32_t>(uint_field(d, "irq_vcpu", 0));
        dc.mmio_base = size_field(d, "mmio_base", 0);
      }
      c.devices.push_back(dc);
    }
  }
  if (j.contains("pin")) {
    c.vcpu_cores = core_list(j["pin"], "vcpus");
    c.io_cores = core_list(j["pin"], "io");
  }
  if (j.contains("packets")) {
    const auto& p = j["packets"];
    vm.packets.enabled = true;
    if (p.contains("file")) {
      vm.packets.file = p["file"].get<std::string>();
    } else {
      const auto& g = p.contains("generate") ? p["generate"] : p;
      vm.packets.count = uint_field(g, "count", 0);
      vm.packets.start = uint_field(g, "start", vm.packets.start);
      vm.packets.spacing = uint_field(g, "spacing", vm.packets.spacing);
      vm.packets.min_len = static_cast<std::uint32_t>(uint_field(g, "min_len", vm.packets.min_len));
      vm.packets.max_len = static_cast<std::uint32_t>(uint_field(g, "max_len", vm.packets.max_len));
      if (vm.packets.min_len == 0 || vm.packets.min_len > vm.packets.max_len)
        throw ConfigError("packet lengths need 0 < min_len <= max_len");
    }
  }
  vm.disk_sectors = uint_field(j, "disk_sectors", 0);
  return vm;
}

} // namespace

Scenario parse_scenario(const std::string& text, const std::filesystem::path& base_dir)
{
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("scenario is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != kScenarioFormat)
    throw ConfigError(std::string("scenario must carry format \"") + kScenarioFormat + "\"");
  Scenario s;
  s.base_dir = base_dir;
  s.name = j.value("name", "");
  if (s.name.empty())
    throw ConfigError("scenario needs a name");
  const auto m = measure_from_string(j.value("measure", "none"));
  if (!m)
    throw ConfigError("unknown measure \"" + j.value("measure", "") + "\"");
  s.measure = *m;
  s.repetitions = uint_field(j, "repetitions", s.repetitions);
  if (s.repetitions == 0)
    throw ConfigError("repetitions must be positive");
  s.timer_period = uint_field(j, "timer_period", 0);
  s.cores = uint_field(j, "cores", 8);
  s.host_ram = size_field(j, "host_ram", s.host_ram);
  const std::string il = j.value("interleave", "random");
  if (il == "random")
    s.interleave = sim::Interleave::Random;
  else if (il == "round-robin")
    s.interleave = sim::Interleave::RoundRobin;
  else
    throw ConfigError("interleave must be \"random\" or \"round-robin\"");
  if (!j.contains("vms") || !j["vms"].is_array() || j["vms"].empty())
    throw ConfigError("scenario needs at least one VM");
  for (std::size_t i = 0; i < j["vms"].size(); ++i)
    s.vms.push_back(parse_vm(j["vms"][i], i));
  return s;
}

Scenario load_scenario(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open scenario " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str(), path.parent_path());
}

guest::Program load_guest(const Scenario& s, const VmSpec& vm)
{
  std::string source;
  if (vm.guest.rfind("canned:", 0) == 0) {
    auto src = guest::canned_source(vm.guest.substr(7));
    if (!src)
      throw ConfigError("no built-in guest \"" + vm.guest.substr(7) + "\"");
    source = *src;
  } else {
    std::ifstream in(s.base_dir / vm.guest);
    if (!in)
      throw ConfigError("cannot open guest program " + (s.base_dir / vm.guest).string());
    std::ostringstream ss;
    ss << in.rdbuf();
    source = ss.str();
  }
  const std::map<std::string, std::string> vars = {
    {"REPS", std::to_string(s.repetitions)},
    {"ROUNDS", std::to_string(std::max<std::uint64_t>(1, s.repetitions / 2))},
  };
  return guest::assemble(guest::substitute(source, vars));
}

std::string exit_log_csv(const std::vector<ExitRecord>& log)
{
  std::ostringstream os;
  os << "cycle,core,vmid,vcpuid,reason,info,handler,kvm_cycles,duv_cycles\n";
  char buf[64];
  for (const auto& r : log) {
    os << r.cycle << ',' << r.core << ',' << r.vmid << ',' << r.vcpuid << ',' << r.reason << ",0x" << std::hex
       << r.info << std::dec << ',' << r.handler << ',';
    std::snprintf(buf, sizeof buf, "%.1f,%.1f", r.kvm_cycles, r.duv_cycles);
    os << buf << '\n';
  }
  return os.str();
}

BenchReport make_report(const sim::Trace& trace, const CostModel& model, Measure measure)
{
  BenchReport r;
  r.measure = std::string(to_string(measure));
  r.model = model;
  r.events = trace.size();
  char hex[32];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(trace.digest()));
  r.trace_digest = hex;

  const auto attr = attribute(trace, measure);
  r.ops = attr.ops;
  std::vector<bool> rest(attr.measured.size());
  for (std::size_t i = 0; i < rest.size(); ++i)
    rest[i] = !attr.measured[i];

  for (Arch a : {Arch::Kvm, Arch::Duvisor}) {
    auto& t = a == Arch::Kvm ? r.kvm : r.duv;
    const Priced all = price(trace, model, a);
    t.charges = all.counts;
    if (attr.ops > 0) {
      const Priced m = price(trace, model, a, attr.measured);
      for (const auto& [seg, c] : m.cycles)
        t.per_op[seg] = c / static_cast<double>(attr.ops);
      t.total = m.total / static_cast<double>(attr.ops);
    }
    t.background = price(trace, model, a, rest).total;
  }
  r.saved_cycles = r.kvm.total - r.duv.total;
  r.improvement_pct = r.kvm.total > 0 ? 100.0 * r.saved_cycles / r.kvm.total : 0;
  for (const auto& e : trace.events())
    if (e.kind == sim::EventKind::VmExit)
      ++r.exits_by_reason[std::string(hw::to_string(static_cast<hw::ExitReason>(e.reason)))];
  return r;
}

namespace {

std::vector<ExitRecord> build_exit_log(const sim::Trace& trace, const CostModel& model)
{
  const std::size_t n = trace.size();
  std::vector<ExitRecord> log;
  std::vector<std::size_t> slot(n, SIZE_MAX);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = trace[i];
    if (e.kind == sim::EventKind::VmExit) {
      slot[i] = log.size();
      ExitRecord r;
      r.cycle = e.cycle;
      r.core = e.core;
      r.vmid = e.vmid;
      r.vcpuid = e.vcpuid;
      r.reason = std::string(hw::to_string(static_cast<hw::ExitReason>(e.reason)));
      r.info = e.info;
      r.handler = std::string(sim::to_string(e.handler));
      r.kvm_cycles = event_cost(e, model, Arch::Kvm);
      r.duv_cycles = event_cost(e, model, Arch::Duvisor);
      log.push_back(r);
      continue;
    }
    if (e.link == sim::kNoLink || e.link >= n || slot[e.link] == SIZE_MAX)
      continue;
    auto& r = log[slot[e.link]];
    if (e.kind == sim::EventKind::Dispatch)
      r.handler = std::string(sim::to_string(e.handler));
    r.kvm_cycles += event_cost(e, model, Arch::Kvm);
    r.duv_cycles += event_cost(e, model, Arch::Duvisor);
  }
  return log;
}

} // namespace

RunResult run_scenario(const Scenario& s, const CostModel& model, std::uint64_t seed, const RunOptions& opts)
{
  Scenario sc = s;
  if (opts.repetitions)
    sc.repetitions = *opts.repetitions;

  sim::KernelConfig kc;
  kc.cores = sc.cores;
  kc.host_ram = sc.host_ram;
  kc.timer_period = sc.timer_period;
  kc.interleave = sc.interleave;
  kc.seed = seed;
  sim::Kernel kernel(kc);

  std::vector<std::unique_ptr<hv::Hypervisor>> vms;
  for (std::size_t i = 0; i < sc.vms.size(); ++i) {
    const auto& spec = sc.vms[i];
    hv::VmConfig cfg = spec.config;
    if (spec.packets.enabled) {
      if (!spec.packets.file.empty()) {
        cfg.packets = pvio::PacketSource::load(sc.base_dir / spec.packets.file);
      } else {
        const std::uint64_t count =
            spec.packets.count ? spec.packets.count : sc.repetitions + sc.repetitions / 100 + 64;
        cfg.packets = pvio::PacketSource::generate(count, spec.packets.start, spec.packets.spacing,
                                                   spec.packets.min_len, spec.packets.max_len,
                                                   seed * 0x9e3779b97f4a7c15ull + i);
      }
    }
    if (spec.disk_sectors)
      cfg.disk_image.assign(spec.disk_sectors * pvio::kSectorSize, 0);
    vms.push_back(std::make_unique<hv::Hypervisor>(kernel, cfg, load_guest(sc, spec)));
    vms.back()->boot();
  }

  RunResult out;
  out.stats = kernel.run();
  out.report = make_report(kernel.trace(), model, sc.measure);
  out.report.scenario = sc.name;
  out.report.seed = seed;
  out.report.repetitions = sc.repetitions;
  out.report.completed = out.stats.completed;
  out.report.steps = out.stats.steps;
  out.report.cycles = out.stats.cycles;
  for (const auto& vm : vms) {
    VmOutcome o;
    o.name = vm->config().name;
    o.finished = vm->finished();
    o.alive = vm->alive();
    o.panicked = vm->panicked();
    o.exit_reason = kernel.cp().process(vm->pid()).exit_reason;
    for (std::uint32_t v = 0; v < vm->vcpu_count(); ++v)
      o.vcpus.push_back(vm->vcpu(v).status);
    // A run only counts as complete if every guest reached HALT.
    if (!o.alive || !std::all_of(o.vcpus.begin(), o.vcpus.end(),
                                 [](hv::VcpuStatus st) { return st == hv::VcpuStatus::Halted; }))
      out.report.completed = false;
    out.vms.push_back(o);
  }
  if (opts.keep_exit_log)
    out.exits = build_exit_log(kernel.trace(), model);
  out.trace = std::move(kernel.trace());
  return out;
}

} // namespace duvisor::bench
