#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "fixtures.hpp"

using namespace duvisor;
using namespace duvisor::bench;
using namespace duvisor::testing;

namespace {

std::string minimal_scenario(const std::string& patch_key = "", const std::string& patch_value = "")
{
  nlohmann::json j = {{"format", kScenarioFormat},
                      {"name", "t"},
                      {"measure", "hypercall"},
                      {"repetitions", 10},
                      {"vms", nlohmann::json::array({{{"guest", "canned:hypercall"}, {"memory", "16M"}}})}};
  if (!patch_key.empty())
    j[patch_key] = nlohmann::json::parse(patch_value);
  return j.dump();
}

} // namespace

TEST_CASE("cost model files")
{
  const auto d = CostModel::defaults();
  CHECK(CostModel::parse(d.to_json()) == d);
  CHECK(CostModel::load(source_dir() / "models" / "default.json") == d);
  for (const char* f : {"kvm_arm.json", "kvm_x86.json"}) {
    const auto m = CostModel::load(source_dir() / "models" / f);
    CHECK(m.segments.size() == d.segments.size());
  }

  CHECK_THROWS_AS(CostModel::parse("{"), ConfigError);
  CHECK_THROWS_AS(CostModel::parse(R"({"format":"nope","segments":{}})"), ConfigError);
  CHECK_THROWS_AS(CostModel::parse(R"({"format":"duvisor-cost-model/1"})"), ConfigError);
  CHECK_THROWS_AS(CostModel::parse(R"({"format":"duvisor-cost-model/1","segments":{"x":{"cycles":-1}}})"), ConfigError);
  CHECK_THROWS_AS(CostModel::parse(R"({"format":"duvisor-cost-model/1","segments":{"x":{"cycles":"a"}}})"), ConfigError);
  CHECK_THROWS_AS(CostModel::load("/nonexistent/model.json"), ConfigError);
  CHECK_THROWS_AS(d.cost("no_such_segment"), PricingError);

  const auto half = d.scaled(0.5);
  for (const auto& [name, seg] : d.segments)
    CHECK(half.cost(name) == doctest::Approx(seg.cycles / 2));
}

TEST_CASE("pricing")
{
  const auto model = CostModel::defaults();
  SUBCASE("an empty trace costs nothing")
  {
    sim::Trace t;
    for (auto a : {Arch::Kvm, Arch::Duvisor}) {
      const auto p = price(t, model, a);
      CHECK(p.total == 0);
      CHECK(p.cycles.empty());
    }
    const auto r = make_report(t, model, Measure::Hypercall);
    CHECK(r.ops == 0);
    CHECK(r.kvm.total == 0);
    CHECK(r.duv.total == 0);
  }

  const auto run = run_named("mmio", 3, 500);
  const auto& trace = run.trace;
  REQUIRE(run.stats.completed);

  SUBCASE("a trace priced twice is the sum of its halves")
  {
    std::vector<bool> first(trace.size()), second(trace.size());
    for (std::size_t i = 0; i < trace.size(); ++i)
      (i < trace.size() / 2 ? first : second)[i] = true;
    for (auto a : {Arch::Kvm, Arch::Duvisor}) {
      const double whole = price(trace, model, a).total;
      const double split = price(trace, model, a, first).total + price(trace, model, a, second).total;
      CHECK(whole == doctest::Approx(split));
      double by_event = 0;
      for (const auto& e : trace.events())
        by_event += event_cost(e, model, a);
      CHECK(whole == doctest::Approx(by_event));
    }
  }
  SUBCASE("scaling the model scales totals and keeps the improvement")
  {
    const auto base = make_report(trace, model, Measure::Mmio);
    const auto big = make_report(trace, model.scaled(3), Measure::Mmio);
    CHECK(big.kvm.total == doctest::Approx(3 * base.kvm.total));
    CHECK(big.duv.total == doctest::Approx(3 * base.duv.total));
    CHECK(big.improvement_pct == doctest::Approx(base.improvement_pct));
  }
  SUBCASE("the kernel path crosses into user space twice per MMIO exit; the delegated path never does")
  {
    const auto r = make_report(trace, model, Measure::Mmio);
    CHECK(r.ops == 500);
    CHECK(r.kvm.per_op.at("hs_hu_transfer") == doctest::Approx(2 * model.cost("hs_hu_transfer")));
    CHECK(r.duv.per_op.count("hs_hu_transfer") == 0);
    CHECK(r.duv.charges.count("hs_hu_transfer") == 0);
  }
  SUBCASE("a model missing a routed segment is refused")
  {
    auto gap = model;
    gap.segments.erase("mmio_emul_kvm");
    CHECK_THROWS_AS(price(trace, gap, Arch::Kvm), PricingError);
    CHECK_NOTHROW(price(trace, gap, Arch::Duvisor));
  }
}

TEST_CASE("reports")
{
  const auto run = run_named("io_notify", 1, 2000);
  REQUIRE(run.stats.completed);
  const auto& r = run.report;

  SUBCASE("per-notify totals do not depend on the repetition count")
  {
    const auto csv = to_csv(r);
    CHECK(csv.rfind("scenario,seed,ops,kvm_total,duv_total,improvement_pct,saved_cycles,", 0) == 0);
    CHECK(csv.find("\nio_notify,1,") != std::string::npos);
    CHECK(csv.find(",28362.00,10448.00,") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
  }
  SUBCASE("JSON round trip")
  {
    CHECK(report_from_json(to_json(r)) == r);
    CHECK_THROWS_AS(report_from_json("[]"), ConfigError);
  }
  SUBCASE("text names both paths")
  {
    const auto t = to_text(r);
    CHECK(t.find("io_notify") != std::string::npos);
    CHECK(t.find("kvm ") != std::string::npos);
    CHECK(t.find("duvisor ") != std::string::npos);
  }
  SUBCASE("formats")
  {
    CHECK(format_from_string("csv") == Format::Csv);
    CHECK(format_from_string("json") == Format::Json);
    CHECK(format_from_string("text") == Format::Text);
    CHECK_THROWS_AS(format_from_string("xml"), ConfigError);
    CHECK(render(r, Format::Csv) == to_csv(r));
  }
  SUBCASE("output file")
  {
    const auto p = std::filesystem::temp_directory_path() / "duvisor_report.csv";
    write_output(p, "x\n");
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    CHECK(line == "x");
    std::filesystem::remove(p);
    CHECK_THROWS(write_output("/nonexistent/dir/out.csv", "x"));
  }
}

TEST_CASE("scenario files")
{
  SUBCASE("sizes")
  {
    CHECK(parse_size("4096") == 4096);
    CHECK(parse_size("64K") == 64ull << 10);
    CHECK(parse_size("512M") == 512ull << 20);
    CHECK(parse_size("16G") == 16ull << 30);
    for (const char* bad : {"", "M", "12Q", "-4", "99999999999999999999G"})
      CHECK_THROWS_AS(parse_size(bad), ConfigError);
  }
  SUBCASE("every shipped scenario parses")
  {
    for (const auto& n : kScenarios) {
      const auto s = scenario(n);
      CHECK(s.name == n);
      CHECK(s.measure != Measure::None);
      CHECK(s.repetitions == 100'000);
      CHECK_NOTHROW(load_guest(s, s.vms.at(0)));
    }
    CHECK(scenario("io_notify").vms[0].config.io_cores == std::vector<hw::CoreId>{1, 2});
  }
  SUBCASE("a minimal scenario")
  {
    const auto s = parse_scenario(minimal_scenario());
    CHECK(s.measure == Measure::Hypercall);
    CHECK(s.vms[0].config.memory == 16ull << 20);
    CHECK(load_guest(s, s.vms[0]).code.size() == 4);
  }
  SUBCASE("refusals")
  {
    CHECK_THROWS_AS(parse_scenario("not json"), ConfigError);
    CHECK_THROWS_AS(parse_scenario(minimal_scenario("format", "\"other\"")), ConfigError);
    CHECK_THROWS_AS(parse_scenario(minimal_scenario("measure", "\"speed\"")), ConfigError);
    CHECK_THROWS_AS(parse_scenario(minimal_scenario("repetitions", "0")), ConfigError);
    CHECK_THROWS_AS(parse_scenario(minimal_scenario("interleave", "\"sideways\"")), ConfigError);
    CHECK_THROWS_AS(parse_scenario(minimal_scenario("vms", "[]")), ConfigError);
    CHECK_THROWS_AS(parse_scenario(minimal_scenario("vms", R"([{"memory":"16M"}])")), ConfigError);
    CHECK_THROWS_AS(parse_scenario(minimal_scenario("vms", R"([{"guest":"canned:x","devices":["gpu"]}])")), ConfigError);
    CHECK_THROWS_AS(parse_scenario(minimal_scenario("vms", R"([{"guest":"canned:x","memory":"lots"}])")), ConfigError);
    const auto s = parse_scenario(minimal_scenario("vms", R"([{"guest":"canned:nothing"}])"));
    CHECK_THROWS_AS(load_guest(s, s.vms[0]), ConfigError);
    CHECK_THROWS_AS(load_scenario("/nonexistent.json"), ConfigError);
  }
}
