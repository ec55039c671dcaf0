#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "duvisor/mmu/page_table.hpp"
#include "duvisor/mmu/translate.hpp"
#include "properties.hpp"

using namespace duvisor;
using namespace duvisor::mmu;

namespace {

constexpr std::uint64_t kBase = 0x1'0000'0000ull;

struct World
{
  PhysicalMemory mem{kBase, 256ull << 20};
  PmcBank bank;
  std::uint64_t next = kBase;
  StageTwoPageTable s2{mem, [this] {
                         const auto p = next;
                         next += kPageSize;
                         return p;
                       }};

  World() { bank.slots[0] = {kBase, 128ull << 20, kPermRW, true, true}; }
  WalkContext ctx() { return {bank, mem}; }
};

} // namespace

TEST_CASE("PMC check")
{
  PmcBank b;
  b.slots[0] = {0x8000'0000, 512ull << 20, kPermRW, true, true};
  CHECK(b.valid_count() == 1);
  CHECK(b.first_free() == std::optional<std::size_t>(1));

  CHECK(pmc_check(b, 0x1234, 8, false, Access::Write));
  CHECK(pmc_check(b, 0x8000'1000, 8, true, Access::Read));
  CHECK_FALSE(pmc_check(b, 0x8000'1000, 8, true, Access::Execute));
  const std::uint64_t end = 0x8000'0000 + (512ull << 20);
  CHECK(pmc_check(b, end - 1, 1, true, Access::Read));
  CHECK_FALSE(pmc_check(b, end, 1, true, Access::Read));
  CHECK_FALSE(pmc_check(b, end - 4, 8, true, Access::Read));

  SUBCASE("V bit clear opens nothing to the guest")
  {
    b.slots[0].v_bit = false;
    CHECK_FALSE(pmc_check(b, 0x8000'1000, 8, true, Access::Read));
  }
  SUBCASE("boundary sweep against interval membership")
  {
    for (std::uint64_t off = 0; off < 64; ++off) {
      const std::uint64_t hpa = end - 32 + off;
      for (std::uint64_t len : {1, 2, 4, 8}) {
        const bool want = hpa >= 0x8000'0000 && hpa + len <= end;
        CHECK(pmc_check(b, hpa, len, true, Access::Read) == want);
      }
    }
  }
}

TEST_CASE("stage-2 table")
{
  World w;
  SUBCASE("map then translate")
  {
    CHECK(w.s2.map(0x1000, kBase + 0x8000'1000 % (64ull << 20), kPermRW) == MapStatus::Installed);
    const auto t = translate_gpa(w.ctx(), w.s2.root(), 0x1000, Access::Read);
    REQUIRE(std::holds_alternative<Translation>(t));
    CHECK(std::get<Translation>(t).hpa == kBase + 0x8000'1000 % (64ull << 20));
  }
  SUBCASE("same mapping twice is a no-op, a different HPA is refused")
  {
    CHECK(w.s2.map(0x1000, kBase + 0x10'0000, kPermRW) == MapStatus::Installed);
    CHECK(w.s2.map(0x1000, kBase + 0x10'0000, kPermRW) == MapStatus::AlreadyMapped);
    CHECK(w.s2.map(0x1000, kBase + 0x20'0000, kPermRW) == MapStatus::Conflict);
  }
  SUBCASE("mapping outside the V regions succeeds, the access does not")
  {
    const std::uint64_t foreign = kBase + (200ull << 20);
    CHECK(w.s2.map(0x2000, foreign, kPermRW) == MapStatus::Installed);
    const auto t = translate_gpa(w.ctx(), w.s2.root(), 0x2000, Access::Read);
    REQUIRE(std::holds_alternative<Fault>(t));
    CHECK(std::get<Fault>(t) == Fault{FaultKind::PmcViolation, foreign});
  }
  SUBCASE("a table node outside the V regions is itself refused")
  {
    w.s2.map(0x3000, kBase + 0x10'0000, kPermRW);
    const std::uint64_t moved = kBase + (200ull << 20);
    w.s2.set_raw_entry(0x3000, 1, pte::make_table(moved));
    w.mem.write_u64(moved + 8 * level_index(0x3000, 0), pte::make_leaf(kBase + 0x10'0000, kPermRW));
    const auto t = translate_gpa(w.ctx(), w.s2.root(), 0x3000, Access::Read);
    REQUIRE(std::holds_alternative<Fault>(t));
    CHECK(std::get<Fault>(t).kind == FaultKind::PmcViolation);
    CHECK(std::get<Fault>(t).addr == moved + 8 * level_index(0x3000, 0));
  }
  SUBCASE("unmap and lookup")
  {
    w.s2.map(0x5000, kBase + 0x30'0000, kPermRWX);
    CHECK(w.s2.lookup(0x5000) == std::optional<Mapping>(Mapping{0x5000, kBase + 0x30'0000, kPermRWX}));
    CHECK(w.s2.unmap(0x5000));
    CHECK_FALSE(w.s2.lookup(0x5000));
    CHECK_FALSE(w.s2.unmap(0x5000));
  }
  SUBCASE("write through a read-only mapping is a stage-2 fault")
  {
    w.s2.map(0x6000, kBase + 0x40'0000, kPermR);
    const auto t = translate_gpa(w.ctx(), w.s2.root(), 0x6000, Access::Write);
    CHECK(std::get<Fault>(t) == Fault{FaultKind::S2PageFault, 0x6000});
  }
}

TEST_CASE("two-stage walk examples")
{
  World w;
  SUBCASE("identity stages")
  {
    w.s2.map(0x1000, kBase + 0x1000, kPermRW);
    const auto t = translate(w.ctx(), std::nullopt, w.s2.root(), 0x1000, Access::Read);
    CHECK(std::get<Translation>(t).gpa == 0x1000);
  }
  SUBCASE("stage 1 maps to a GPA that stage 2 lacks")
  {
    // Stage-1 root at GPA 0x10000, mapped through stage 2 to host RAM.
    for (std::uint64_t g = 0x10000; g < 0x14000; g += kPageSize)
      w.s2.map(g, kBase + 0x100'0000 + g, kPermRW);
    StageOnePageTable s1{0x10000};
    std::uint64_t pool = 0x11000;
    auto resolve = [&](std::uint64_t gpa) { return std::get<Translation>(translate_gpa(w.ctx(), w.s2.root(), gpa, Access::Read, 8)).hpa; };
    auto rd = [&](std::uint64_t gpa) -> std::optional<std::uint64_t> { return w.mem.read_u64(resolve(gpa)); };
    auto wr = [&](std::uint64_t gpa, std::uint64_t v) {
      w.mem.write_u64(resolve(gpa), v);
      return true;
    };
    REQUIRE(s1.map(0x7000'0000, 0x4000, kPermRW, rd, wr, pool, 0x14000));
    const auto t = translate(w.ctx(), s1.root, w.s2.root(), 0x7000'0008, Access::Read);
    CHECK(std::get<Fault>(t) == Fault{FaultKind::S2PageFault, 0x4008});
    const auto miss = translate(w.ctx(), s1.root, w.s2.root(), 0x7100'0000, Access::Read);
    CHECK(std::get<Fault>(miss).kind == FaultKind::S1PageFault);
  }
}

TEST_CASE("10,000 random tables agree with the flat reference walker")
{
  const auto r = testing::translation_oracle(10'000, 11);
  INFO(r.first_mismatch);
  CHECK(r.mismatches == 0);
  CHECK(r.hits > 0);
  CHECK(r.faults_s1 > 0);
  CHECK(r.faults_pmc > 0);
}

TEST_CASE("stage-2 dump matches the golden file")
{
  World w;
  const std::uint64_t gpas[] = {0x8000'0000, 0x8000'1000, 0x8020'0000, 0x1000'1000, 0x40'0000'0000 - 0x1000};
  std::uint8_t perms = kPermR;
  for (auto g : gpas) {
    w.s2.map(g, kBase + 0x100'0000 + (g & 0xff'ffff), perms);
    perms = static_cast<std::uint8_t>(perms % 7 + 1);
  }
  const auto dump = w.s2.dump();
  CHECK(w.s2.mappings().size() == 5);

  const std::string path = std::string(DUVISOR_GOLDEN_DIR) + "/s2pt_dump.txt";
  if (std::getenv("DUVISOR_UPDATE_GOLDEN")) {
    std::ofstream(path) << dump;
  }
  std::ifstream in(path);
  REQUIRE(in);
  std::stringstream want;
  want << in.rdbuf();
  CHECK(dump == want.str());
}

TEST_CASE("physical memory")
{
  PhysicalMemory m(kBase, 1ull << 20);
  CHECK(m.read_u64(kBase + 8) == 0);
  CHECK(m.resident_pages() == 0);
  m.write_uint(kBase + 4094, 0xbeef, 2);
  CHECK(m.read_uint(kBase + 4094, 2) == 0xbeef);
  CHECK(m.contains(kBase, 1ull << 20));
  CHECK_FALSE(m.contains(kBase + (1ull << 20), 1));
  CHECK_THROWS(m.read_u64(kBase - 8));

  std::vector<MemAccess> seen;
  m.set_observer([&](const MemAccess& a) { seen.push_back(a); });
  m.write_u64(kBase, 1, Origin::Guest);
  REQUIRE(seen.size() == 1);
  CHECK(seen[0].origin == Origin::Guest);
  CHECK(seen[0].write);
  m.zero_range(kBase, 1ull << 20);
  CHECK(m.read_u64(kBase) == 0);
}
