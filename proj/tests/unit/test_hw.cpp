#include <doctest.h>

#include "duvisor/hw/machine.hpp"
#include "properties.hpp"

using namespace duvisor;
using namespace duvisor::hw;

namespace {

Machine enabled_machine(std::size_t cores = 2)
{
  Machine m(cores);
  for (CoreId i = 0; i < cores; ++i) {
    auto& c = m.core(i);
    c.regs.h_enable = 1;
    c.regs.h_deleg = kDelegAll;
    c.regs.hu_ehb = 0x7000'1000;
  }
  return m;
}

} // namespace

TEST_CASE("exhaustive routing and access control agree with the reference")
{
  const auto r = testing::routing_suite();
  INFO(r.first_mismatch);
  CHECK(r.mismatches == 0);
  CHECK(r.timer_to_hu == 0);
  CHECK(r.cases > 55'000);
}

TEST_CASE("csr access rules")
{
  Machine m(1);
  auto& c = m.core(0);

  SUBCASE("HU reads hu_er once HS has enabled DV")
  {
    REQUIRE(std::holds_alternative<Word>(m.csr_access(0, Reg::HEnable, CsrOp::Write, 1)));
    c.regs.hu_er = static_cast<Word>(ExitReason::Hypercall);
    c.mode = Mode::HU;
    const auto r = m.csr_access(0, Reg::HuEr, CsrOp::Read);
    REQUIRE(std::holds_alternative<Word>(r));
    CHECK(std::get<Word>(r) == static_cast<Word>(ExitReason::Hypercall));
  }
  SUBCASE("HU write to h_deleg traps to HS")
  {
    c.regs.h_enable = 1;
    c.mode = Mode::HU;
    const auto r = m.csr_access(0, Reg::HDeleg, CsrOp::Write, 0);
    REQUIRE(std::holds_alternative<TrapEvent>(r));
    const auto t = std::get<TrapEvent>(r);
    CHECK(t.reason == ExitReason::IllegalHuAccess);
    CHECK(t.destination == Destination::HsHandler);
    CHECK(t.info == static_cast<Word>(Reg::HDeleg));
    CHECK(c.mode == Mode::HS);
  }
  SUBCASE("all-ones h_deleg reads back without the timer bit")
  {
    m.csr_access(0, Reg::HDeleg, CsrOp::Write, ~Word{0});
    const auto v = std::get<Word>(m.csr_access(0, Reg::HDeleg, CsrOp::Read));
    CHECK((v & deleg_bit(ExitReason::Timer)) == 0);
    CHECK(v == (kDelegValidMask & ~deleg_bit(ExitReason::Timer)));
  }
  SUBCASE("hu_ register with h_enable off traps")
  {
    c.mode = Mode::HU;
    CHECK(std::holds_alternative<TrapEvent>(m.csr_access(0, Reg::HuVpc, CsrOp::Read)));
  }
  SUBCASE("dump is one row per register, mode and enable state")
  {
    const auto csv = access_table_csv();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 9 * 3 * 2);
    CHECK(csv.find("h_deleg,HU,1,trap,trap") != std::string::npos);
    CHECK(csv.find("hu_er,HU,1,legal,legal") != std::string::npos);
  }
}

TEST_CASE("trap routing examples")
{
  auto m = enabled_machine(1);
  auto& c = m.core(0);
  c.mode = Mode::V;
  c.pc = 0x8000'0040;

  SUBCASE("delegated stage-2 load fault lands in HU with the GPA")
  {
    const auto t = m.route_trap(0, ExitReason::S2pfLoad, 0x4000);
    CHECK(t.destination == Destination::HuHandler);
    CHECK(c.regs.hu_er == static_cast<Word>(ExitReason::S2pfLoad));
    CHECK(c.regs.hu_einfo == 0x4000);
    CHECK(c.regs.hu_vpc == 0x8000'0040);
  }
  SUBCASE("timer goes to HS whatever h_deleg holds")
  {
    c.regs.h_deleg = ~Word{0};
    CHECK(m.route_trap(0, ExitReason::Timer, 0).destination == Destination::HsHandler);
  }
  SUBCASE("undelegated stage-2 fault goes to HS")
  {
    c.regs.h_deleg = 0;
    CHECK(m.route_trap(0, ExitReason::S2pfLoad, 0x4000).destination == Destination::HsHandler);
    CHECK(c.hs_epc == 0x8000'0040);
  }
  SUBCASE("a trap taken in HU is never nested into HU")
  {
    c.mode = Mode::HU;
    CHECK(m.route_trap(0, ExitReason::Hypercall, 0).destination == Destination::HsHandler);
  }
}

TEST_CASE("HURET")
{
  auto m = enabled_machine(1);
  auto& c = m.core(0);
  c.mode = Mode::HU;
  c.regs.hu_vpc = 0x8000'0000;

  SUBCASE("plain entry")
  {
    CHECK_FALSE(m.exec_huret(0).has_value());
    CHECK(c.mode == Mode::V);
    CHECK(c.pc == 0x8000'0000);
    CHECK(c.vip == 0);
  }
  SUBCASE("staged line becomes pending in the guest")
  {
    c.regs.hu_vitr = Word{1} << 3;
    CHECK_FALSE(m.exec_huret(0).has_value());
    CHECK(c.vip == Word{1} << 3);
    CHECK(c.regs.hu_vitr == 0);
  }
  SUBCASE("from V it traps to HS")
  {
    c.mode = Mode::V;
    const auto t = m.exec_huret(0);
    REQUIRE(t);
    CHECK(t->reason == ExitReason::IllegalHuAccess);
    CHECK(t->destination == Destination::HsHandler);
  }
  SUBCASE("from HS it is permitted")
  {
    c.mode = Mode::HS;
    CHECK_FALSE(m.exec_huret(0).has_value());
    CHECK(c.mode == Mode::V);
  }
}

TEST_CASE("HUSUIPI")
{
  auto m = enabled_machine(2);
  for (CoreId i : {0u, 1u}) {
    m.core(i).regs.h_vmid = 7;
    m.core(i).regs.hu_vcpuid = i;
  }
  m.core(0).mode = Mode::HU;

  SUBCASE("delivered to a running target as a UIPI exit carrying the sender")
  {
    m.core(1).mode = Mode::V;
    const auto r = m.exec_husuipi(0, 1);
    CHECK(r.outcome == UipiResult::Outcome::Delivered);
    CHECK(r.target == std::optional<CoreId>(1));
    REQUIRE(r.trap);
    CHECK(r.trap->reason == ExitReason::Uipi);
    CHECK(m.core(1).regs.hu_einfo == 0);
    CHECK(m.core(1).mode == Mode::HU);
  }
  SUBCASE("a different VM never matches; the sender faults to HS")
  {
    m.core(1).regs.h_vmid = 8;
    m.core(1).mode = Mode::V;
    const auto r = m.exec_husuipi(0, 1);
    CHECK(r.outcome == UipiResult::Outcome::Faulted);
    CHECK(m.core(0).mode == Mode::HS);
    CHECK(m.core(1).mode == Mode::V);
  }
  SUBCASE("target in HU latches and fires at its next HURET")
  {
    m.core(1).mode = Mode::HU;
    CHECK(m.exec_husuipi(0, 1).outcome == UipiResult::Outcome::Latched);
    const auto t = m.exec_huret(1);
    REQUIRE(t);
    CHECK(t->reason == ExitReason::Uipi);
    CHECK(t->info == 0);
    CHECK_FALSE(m.core(1).latched_uipi);
  }
  SUBCASE("from V it is illegal")
  {
    m.core(0).mode = Mode::V;
    const auto r = m.exec_husuipi(0, 1);
    CHECK(r.outcome == UipiResult::Outcome::Faulted);
    CHECK(r.trap->reason == ExitReason::IllegalHuAccess);
  }
  SUBCASE("a core that never set its vcpuid cannot be hit as vCPU 0")
  {
    Machine fresh(2);
    fresh.core(0).regs.h_enable = 1;
    fresh.core(1).regs.h_enable = 1;
    fresh.core(0).regs.hu_vcpuid = 5;
    fresh.core(0).mode = Mode::HU;
    CHECK(fresh.exec_husuipi(0, 0).outcome == UipiResult::Outcome::Faulted);
  }
}

TEST_CASE("save and restore")
{
  auto m = enabled_machine(2);
  auto& c = m.core(0);
  c.regs = {0x11, 0x22, 0x33, 0x44, 0x55, 3, 1, kDelegAll, 9};
  c.owner = 4;
  c.latched_uipi = 2;

  SUBCASE("round trip is bit-identical")
  {
    const auto snap = m.save_dv(0);
    REQUIRE(snap);
    c.regs = {};
    c.latched_uipi.reset();
    CHECK(m.restore_dv(0, *snap) == RestoreStatus::Ok);
    CHECK(c.regs == snap->regs);
    CHECK(c.latched_uipi == std::optional<Word>(2));
  }
  SUBCASE("switch A out, B in, A back")
  {
    const auto a = *m.save_dv(0);
    DvSnapshot b;
    b.regs.h_enable = 1;
    b.regs.h_vmid = 12;
    b.regs.hu_vcpuid = 0;
    b.owner = 5;
    CHECK(m.restore_dv(0, b) == RestoreStatus::Ok);
    CHECK(m.restore_dv(0, a) == RestoreStatus::Ok);
    CHECK(c.regs.hu_vcpuid == 3);
    CHECK(c.regs.h_vmid == 9);
  }
  SUBCASE("sibling vCPU of the same process may share the VMID")
  {
    m.core(1).regs.h_vmid = 9;
    m.core(1).owner = 4;
    CHECK(m.restore_dv(0, *m.save_dv(0)) == RestoreStatus::Ok);
  }
  SUBCASE("another process holding the VMID is refused")
  {
    m.core(1).regs.h_vmid = 9;
    m.core(1).owner = 6;
    CHECK(m.restore_dv(0, *m.save_dv(0)) == RestoreStatus::VmidConflict);
  }
  SUBCASE("only from HS")
  {
    c.mode = Mode::HU;
    CHECK_FALSE(m.save_dv(0));
    CHECK(m.restore_dv(0, DvSnapshot{}) == RestoreStatus::NotInHs);
  }
}

TEST_CASE("PMC programming")
{
  Machine m(1);
  const mmu::PmcRegion r{0x8000'0000, 512ull << 20, mmu::kPermRW, true, true};
  CHECK_FALSE(m.pmc_program(0, 0, r));
  CHECK(m.core(0).pmc.slots[0] == r);
  CHECK_THROWS_AS(m.pmc_program(0, 64, r), ConfigError);
  CHECK_THROWS_AS(m.pmc_program(0, 1, {0x8000'0001, 4096, mmu::kPermRW, true, true}), ConfigError);
  m.core(0).mode = Mode::HU;
  m.core(0).regs.h_enable = 1;
  const auto t = m.pmc_program(0, 1, r);
  REQUIRE(t);
  CHECK(t->reason == ExitReason::IllegalHuAccess);
  CHECK_FALSE(m.core(0).pmc.slots[1].valid);
}

TEST_CASE("names round-trip")
{
  for (unsigned i = 0; i < kExitReasonCount; ++i) {
    const auto r = static_cast<ExitReason>(i);
    CHECK(exit_reason_from_string(to_string(r)) == std::optional<ExitReason>(r));
  }
  for (unsigned i = 0; i < kRegCount; ++i) {
    const auto r = static_cast<Reg>(i);
    CHECK(reg_from_string(to_string(r)) == std::optional<Reg>(r));
  }
}
