#include <doctest.h>

#include <set>

#include "duvisor/guest/isa.hpp"
#include "fixtures.hpp"

using namespace duvisor;
using namespace duvisor::testing;
using sim::EventKind;
using sim::Handler;

namespace {

void with_console(hv::VmConfig& c)
{
  c.devices = {{pvio::DeviceKind::Console, 0, 0}};
}

std::string name(EventKind k, Handler h = Handler::None)
{
  std::string s(sim::to_string(k));
  if (h != Handler::None)
    s += "/" + std::string(sim::to_string(h));
  return s;
}

/// The part of a VM's trace after its BootDone.
std::vector<std::string> after_boot(const MiniVm& m)
{
  auto all = shape(m.trace(), static_cast<std::uint16_t>(m.hv->pid()));
  const auto it = std::find(all.begin(), all.end(), std::string(sim::to_string(EventKind::BootDone)));
  REQUIRE(it != all.end());
  return {it + 1, all.end()};
}

std::size_t count_after_boot(const MiniVm& m, EventKind kind)
{
  const auto boot = m.trace().boot_done(static_cast<std::uint16_t>(m.hv->pid()));
  REQUIRE(boot);
  std::size_t n = 0;
  for (std::size_t i = *boot; i < m.trace().size(); ++i)
    n += m.trace()[i].kind == kind;
  return n;
}

} // namespace

TEST_CASE("boot")
{
  SUBCASE("one vCPU reaches the guest with exactly one HURET")
  {
    MiniVm m("HALT\n", with_console);
    const auto st = m.run();
    CHECK(st.completed);
    CHECK(m.vm().finished());
    CHECK(m.vm().vcpu(0).status == hv::VcpuStatus::Halted);
    CHECK(count(m.trace(), EventKind::VmEntry, Handler::EntryHuret) == 1);
    CHECK(count(m.trace(), EventKind::BootDone) == 1);
    CHECK(m.kernel->escapes().empty());
  }
  SUBCASE("two vCPUs carry their own ids on their own cores")
  {
    MiniVm m("ENTRY 0\nHALT\nENTRY 1\nHALT\n", [](hv::VmConfig& c) {
      c.vcpus = 2;
      c.vcpu_cores = {2, 1};
    });
    CHECK(m.run().completed);
    CHECK(m.kernel->machine().core(2).regs.hu_vcpuid == 0);
    CHECK(m.kernel->machine().core(1).regs.hu_vcpuid == 1);
    CHECK(m.kernel->machine().core(1).regs.h_vmid == m.vm().vmid());
  }
  SUBCASE("refusals")
  {
    using Tweak = std::function<void(hv::VmConfig&)>;
    const std::vector<Tweak> bad = {
        [](hv::VmConfig& c) { c.skip_enable_dv = true; },
        [](hv::VmConfig& c) { c.initial_grants = 0; },
        [](hv::VmConfig& c) { c.vcpus = 0; },
        [](hv::VmConfig& c) { c.memory = (16ull << 20) + 100; },
        [](hv::VmConfig& c) { c.vcpu_cores = {9}; },
        [](hv::VmConfig& c) { c.devices = {{pvio::DeviceKind::Console, 0, 0}, {pvio::DeviceKind::Console, 0, 0}}; },
        [](hv::VmConfig& c) { c.devices = {{pvio::DeviceKind::Net, 3, 0}}; },
        [](hv::VmConfig& c) { c.devices = {{pvio::DeviceKind::Console, 0, hv::kRamBase}}; },
        [](hv::VmConfig& c) { c.grant_size = 64ull << 30; },
    };
    for (std::size_t i = 0; i < bad.size(); ++i) {
      INFO("case " << i);
      CHECK_THROWS_AS(MiniVm("HALT\n", bad[i]), hv::BootError);
    }
  }
  SUBCASE("an image bigger than guest memory")
  {
    std::string src = "DATA \"";
    src += std::string(5u << 20, 'x');
    src += "\"\nHALT\n";
    CHECK_THROWS_AS(MiniVm(src, [](hv::VmConfig& c) { c.memory = 4ull << 20; }), hv::BootError);
  }
}

TEST_CASE("first touch of an unmapped page")
{
  MiniVm m("LOAD.b r5, 0x80400000\nHALT\n");
  CHECK(m.run().completed);
  const auto s = after_boot(m);
  const std::vector<std::string> want_prefix = {name(EventKind::VmEntry, Handler::EntryHuret),
                                                name(EventKind::VmExit, Handler::ExitToHu),
                                                name(EventKind::Dispatch, Handler::S2pf), name(EventKind::PageAlloc)};
  REQUIRE(s.size() > want_prefix.size());
  CHECK(std::equal(want_prefix.begin(), want_prefix.end(), s.begin()));
  const std::vector<std::string> want_tail = {name(EventKind::S2Map), name(EventKind::VmEntry, Handler::EntryHuret),
                                              name(EventKind::VmExit, Handler::ExitToHu),
                                              name(EventKind::Dispatch, Handler::HypercallHalt), name(EventKind::GuestHalt)};
  REQUIRE(s.size() >= want_tail.size());
  CHECK(std::equal(want_tail.begin(), want_tail.end(), s.end() - static_cast<std::ptrdiff_t>(want_tail.size())));
  CHECK(m.vm().s2pt().lookup(0x8040'0000));
}

TEST_CASE("sequential touches take consecutive, distinct host pages")
{
  MiniVm m("LI r6, 0x80200000\nLOOP 50 {\n LOAD.b r5, 0(r6)\n ADDI r6, r6, 4096\n}\nHALT\n");
  CHECK(m.run().completed);
  CHECK(count_after_boot(m, EventKind::PageAlloc) == 50);
  std::set<std::uint64_t> hpas;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const auto map = m.vm().s2pt().lookup(0x8020'0000 + i * mmu::kPageSize);
    REQUIRE(map);
    hpas.insert(map->hpa);
  }
  CHECK(hpas.size() == 50);
  CHECK(m.vm().vcpu(0).exits == 51);
}

TEST_CASE("grants")
{
  const std::string touch = "LI r6, 0x80200000\nLOOP 400 {\n LOAD.b r5, 0(r6)\n ADDI r6, r6, 4096\n}\nHALT\n";
  SUBCASE("an exhausted grant is extended mid-run")
  {
    MiniVm m(touch, [](hv::VmConfig& c) { c.grant_size = 1ull << 20; });
    CHECK(m.run().completed);
    CHECK(m.vm().vcpu(0).status == hv::VcpuStatus::Halted);
    CHECK(m.vm().allocator().grants().size() == 2);
    CHECK(count(m.trace(), EventKind::Control, Handler::CtlAllocRegion) == 2);
  }
  SUBCASE("without extensions the guest runs out of memory")
  {
    MiniVm m(touch, [](hv::VmConfig& c) {
      c.grant_size = 1ull << 20;
      c.grant_extensions = 0;
    });
    m.run();
    CHECK(m.vm().vcpu(0).status == hv::VcpuStatus::Aborted);
    CHECK(m.vm().vcpu(0).abort_reason == "guest out of memory");
    CHECK(m.vm().alive());
  }
}

TEST_CASE("hypercalls")
{
  SUBCASE("unknown number returns the error value")
  {
    MiniVm m("LI r10, 5\nHYPERCALL 77\nHALT\n");
    CHECK(m.run().completed);
    CHECK(m.vm().vcpu(0).cpu.regs[guest::kRegArg] == guest::hcall::kErrUnknown);
    CHECK(count(m.trace(), EventKind::Dispatch, Handler::HypercallUnknown) == 1);
  }
  SUBCASE("a vIPI to self is pending at the next entry, so WFI falls through")
  {
    MiniVm m("SEND_VIPI 0\nWFI\nIRQ_ACK r5\nHALT\n");
    CHECK(m.run().completed);
    CHECK(m.vm().vcpu(0).status == hv::VcpuStatus::Halted);
    CHECK(m.vm().vcpu(0).cpu.regs[5] == pvio::kIpiIrq);
    CHECK(count(m.trace(), EventKind::Dispatch, Handler::Wfi) == 0);
    CHECK(count(m.trace(), EventKind::IrqAck) == 1);
  }
  SUBCASE("a vIPI to a vCPU that does not exist")
  {
    MiniVm m("SEND_VIPI 3\nHALT\n");
    CHECK(m.run().completed);
    CHECK(m.vm().vcpu(0).cpu.regs[guest::kRegArg] == guest::hcall::kErrUnknown);
    CHECK(count(m.trace(), EventKind::Insert) == 0);
  }
}

TEST_CASE("MMIO")
{
  SUBCASE("console status read")
  {
    MiniVm m("MMIO_LOAD.w r5, 0x10000004\nHALT\n", with_console);
    CHECK(m.run().completed);
    CHECK(m.vm().vcpu(0).cpu.regs[5] == 1);
    CHECK(count(m.trace(), EventKind::MmioEmul) == 1);
  }
  SUBCASE("console output")
  {
    MiniVm m("LI r5, 0x41\nMMIO_STORE.b r5, 0x10000000\nHALT\n", with_console);
    CHECK(m.run().completed);
    CHECK(m.vm().console()->output() == "A");
  }
  SUBCASE("an access straddling the end of the window aborts the guest")
  {
    const auto end = 0x1000'0000 + pvio::kMmioWindow - 1;
    MiniVm m("MMIO_LOAD.h r5, " + std::to_string(end) + "\nHALT\n", with_console);
    m.run();
    CHECK(m.vm().vcpu(0).status == hv::VcpuStatus::Aborted);
    CHECK(count(m.trace(), EventKind::MmioEmul) == 0);
  }
  SUBCASE("a load from an address no device claims aborts")
  {
    MiniVm m("LOAD r5, 0x20000000\nHALT\n", with_console);
    m.run();
    CHECK(m.vm().vcpu(0).status == hv::VcpuStatus::Aborted);
  }
}

TEST_CASE("interrupt injection")
{
  SUBCASE("a hundred injections before the ack are seen once")
  {
    MiniVm m("WFI\nIRQ_ACK r5\nIRQ_ACK r6\nHALT\n");
    for (int i = 0; i < 100; ++i)
      m.vm().inject_virq(3, 0, 3, Handler::InsertDevice);
    CHECK(m.run().completed);
    CHECK(count(m.trace(), EventKind::Insert) == 100);
    CHECK(m.vm().vcpu(0).cpu.regs[5] == 3);
    CHECK(m.vm().vcpu(0).cpu.regs[6] != 3);
    std::size_t acks = 0;
    for (const auto& e : m.trace().events())
      acks += e.kind == EventKind::IrqAck && e.info == 3;
    CHECK(acks == 1);
  }
  SUBCASE("a notify while the target runs the guest interrupts it with a UIPI exit")
  {
    MiniVm m("ENTRY 0\nLOOP 100000 {\n NOP\n}\nHALT\nENTRY 1\nLOOP 1000 {\n NOP\n}\nSEND_VIPI 0\nHALT\n",
             [](hv::VmConfig& c) { c.vcpus = 2; });
    CHECK(m.run().completed);
    std::size_t uipi_exits = 0;
    for (const auto& e : m.trace().events())
      uipi_exits += e.kind == EventKind::VmExit && e.vcpuid == 0 && e.reason == static_cast<std::uint8_t>(hw::ExitReason::Uipi);
    CHECK(uipi_exits == 1);
    CHECK(count(m.trace(), EventKind::UipiSend) == 1);
    CHECK(count(m.trace(), EventKind::Dispatch, Handler::Uipi) == 1);
    CHECK(count(m.trace(), EventKind::VmExit, Handler::ExitToHs) == 0);
  }
  SUBCASE("ack latency is measured from the insert")
  {
    MiniVm m("ENTRY 0\nWFI\nIRQ_ACK r5\nHALT\nENTRY 1\nSEND_VIPI 0\nHALT\n", [](hv::VmConfig& c) { c.vcpus = 2; });
    CHECK(m.run().completed);
    REQUIRE(m.vm().vcpu(0).ack_latency.size() == 1);
    const auto acks = find(m.trace(), EventKind::IrqAck);
    REQUIRE(acks.size() == 1);
    const auto origin = m.trace()[acks[0]].origin;
    REQUIRE(origin != sim::kNoLink);
    CHECK(m.trace()[origin].kind == EventKind::Insert);
  }
}
