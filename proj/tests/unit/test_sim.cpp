#include <doctest.h>

#include "duvisor/guest/isa.hpp"
#include "fixtures.hpp"

using namespace duvisor;
using namespace duvisor::testing;
using sim::EventKind;
using sim::Handler;

TEST_CASE("same seed, same trace")
{
  for (const auto& name : {"hypercall", "vipi"}) {
    INFO(name);
    const auto a = run_named(name, 42, 300);
    const auto b = run_named(name, 42, 300);
    CHECK(a.trace == b.trace);
    CHECK(a.report == b.report);
    CHECK(a.stats.steps == b.stats.steps);
  }
  // The schedule does depend on the seed.
  CHECK(run_named("vipi", 1, 300).trace.digest() != run_named("vipi", 2, 300).trace.digest());
}

TEST_CASE("stop reasons")
{
  SUBCASE("all done")
  {
    MiniVm m("HALT\n");
    const auto st = m.run();
    CHECK(st.completed);
    CHECK(st.stop_reason == "all actors done");
  }
  SUBCASE("a guest waiting for an interrupt nobody sends")
  {
    MiniVm m("WFI\nHALT\n");
    const auto st = m.run();
    CHECK_FALSE(st.completed);
    CHECK(st.stop_reason == "deadlock: every actor idle with nothing scheduled");
    CHECK(m.vm().vcpu(0).status == hv::VcpuStatus::Blocked);
  }
  SUBCASE("step budget")
  {
    auto kc = MiniVm::small_kernel();
    kc.max_steps = 100;
    MiniVm m("LOOP 1000 {\n HYPERCALL 0\n}\nHALT\n", {}, kc);
    const auto st = m.run();
    CHECK_FALSE(st.completed);
    CHECK(st.stop_reason == "step budget exhausted");
    CHECK(st.steps == 100);
  }
}

TEST_CASE("two VMs share one core under the timer")
{
  auto kc = MiniVm::small_kernel();
  kc.timer_period = 1'000;
  sim::Kernel k(kc);
  std::vector<std::unique_ptr<hv::Hypervisor>> vms;
  for (int i = 0; i < 2; ++i) {
    hv::VmConfig cfg;
    cfg.name = "vm" + std::to_string(i);
    cfg.memory = 16ull << 20;
    cfg.grant_size = 32ull << 20;
    cfg.vcpu_cores = {0};
    vms.push_back(std::make_unique<hv::Hypervisor>(
        k, cfg, guest::assemble("LI r6, 0x80200000\nLOOP 2000 {\n HYPERCALL 0\n LOAD.b r5, 0(r6)\n ADDI r6, r6, 64\n}\nHALT\n")));
    vms.back()->boot();
  }
  const auto st = k.run();
  CHECK(st.completed);
  CHECK(st.timer_ticks > 0);
  // Each VM gets the core back before the other has finished.
  std::size_t switches = 0;
  std::uint16_t last = 0;
  for (const auto& e : k.trace().events())
    if (e.kind == EventKind::Dispatch) {
      switches += last != 0 && e.pid != last;
      last = e.pid;
    }
  CHECK(switches > 2);
  for (const auto& vm : vms) {
    CHECK(vm->vcpu(0).status == hv::VcpuStatus::Halted);
    CHECK(vm->vcpu(0).cpu.regs[6] == 0x8020'0000 + 2000 * 64);
  }
  CHECK(count(k.trace(), EventKind::Dispatch, Handler::HypercallNull) == 4000);
  CHECK(count(k.trace(), EventKind::Kill) == 0);
  CHECK(k.escapes().empty());
  CHECK(k.cp().grants_disjoint());
  CHECK(vms[0]->vmid() != vms[1]->vmid());
}

TEST_CASE("timer interrupts do not change what is measured")
{
  auto s = scenario("hypercall");
  s.repetitions = 2'000;
  const auto quiet = bench::run_scenario(s, bench::CostModel::defaults(), 1, {.repetitions = {}, .keep_exit_log = false});
  s.timer_period = 3'000;
  const auto ticking = bench::run_scenario(s, bench::CostModel::defaults(), 1, {.repetitions = {}, .keep_exit_log = false});
  REQUIRE(ticking.stats.completed);
  CHECK(ticking.stats.timer_ticks > 0);
  CHECK(count(ticking.trace, EventKind::Control, Handler::CtlTimer) > 0);
  CHECK(ticking.report.ops == quiet.report.ops);
  CHECK(ticking.report.duv.total == doctest::Approx(quiet.report.duv.total));
  CHECK(ticking.report.kvm.total == doctest::Approx(quiet.report.kvm.total));
}

TEST_CASE("PMC accounting and escapes")
{
  const auto r = run_named("s2pf", 5, 500);
  CHECK(r.stats.completed);
  CHECK(r.stats.pmc_checks > 500);
  CHECK(r.stats.pmc_denials == 0);
  CHECK(r.report.ops == 500);
}

TEST_CASE("trace csv")
{
  MiniVm m("HALT\n");
  m.run();
  const auto csv = m.trace().to_csv();
  CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == m.trace().size() + 1);
  CHECK(m.trace().boot_done(static_cast<std::uint16_t>(m.vm().pid())));
  CHECK_FALSE(m.trace().boot_done(99));
}
