#include "fixtures.hpp"

#include "duvisor/guest/isa.hpp"

namespace duvisor::testing {

std::filesystem::path source_dir()
{
  return DUVISOR_SOURCE_DIR;
}

std::filesystem::path scenario_path(const std::string& name)
{
  return source_dir() / "scenarios" / (name + ".json");
}

bench::Scenario scenario(const std::string& name)
{
  return bench::load_scenario(scenario_path(name));
}

bench::RunResult run_named(const std::string& name, std::uint64_t seed, std::uint64_t reps,
                           const bench::CostModel& model)
{
  bench::RunOptions opts;
  opts.repetitions = reps;
  opts.keep_exit_log = false;
  return bench::run_scenario(scenario(name), model, seed, opts);
}

sim::KernelConfig MiniVm::small_kernel()
{
  sim::KernelConfig kc;
  kc.cores = 4;
  kc.host_ram = 2ull << 30;
  kc.max_steps = 5'000'000;
  return kc;
}

MiniVm::MiniVm(const std::string& source, const std::function<void(hv::VmConfig&)>& tweak, sim::KernelConfig kc)
{
  kernel = std::make_unique<sim::Kernel>(kc);
  hv::VmConfig cfg;
  cfg.memory = 16ull << 20;
  cfg.grant_size = 32ull << 20;
  if (tweak)
    tweak(cfg);
  hv = std::make_unique<hv::Hypervisor>(*kernel, cfg, guest::assemble(source));
  hv->boot();
}

std::size_t count(const sim::Trace& t, sim::EventKind kind)
{
  std::size_t n = 0;
  for (const auto& e : t.events())
    n += e.kind == kind;
  return n;
}

std::size_t count(const sim::Trace& t, sim::EventKind kind, sim::Handler h)
{
  std::size_t n = 0;
  for (const auto& e : t.events())
    n += e.kind == kind && e.handler == h;
  return n;
}

std::vector<std::uint32_t> find(const sim::Trace& t, sim::EventKind kind)
{
  std::vector<std::uint32_t> out;
  for (std::uint32_t i = 0; i < t.size(); ++i)
    if (t[i].kind == kind)
      out.push_back(i);
  return out;
}

std::vector<std::string> shape(const sim::Trace& t, std::uint16_t pid)
{
  std::vector<std::string> out;
  for (const auto& e : t.events()) {
    if (e.pid != pid || e.kind == sim::EventKind::Control)
      continue;
    std::string s(sim::to_string(e.kind));
    if (e.handler != sim::Handler::None)
      s += "/" + std::string(sim::to_string(e.handler));
    out.push_back(s);
  }
  return out;
}

} // namespace duvisor::testing
