#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "duvisor/bench/scenario.hpp"
#include "duvisor/guest/canned.hpp"
#include "duvisor/hw/machine.hpp"

namespace fs = std::filesystem;
using namespace duvisor;

namespace {

fs::path scenario_dir(const std::string& flag)
{
  if (!flag.empty())
    return flag;
  if (const char* env = std::getenv("DUVISOR_SCENARIOS"))
    return env;
  return DUVISOR_DATA_DIR "/scenarios";
}

fs::path resolve_scenario(const std::string& arg, const fs::path& dir)
{
  if (fs::exists(arg))
    return arg;
  const fs::path named = dir / (arg + ".json");
  if (fs::exists(named))
    return named;
  throw ConfigError("no scenario \"" + arg + "\" (looked for " + named.string() + ")");
}

std::string read_file(const fs::path& p)
{
  std::ifstream in(p);
  if (!in)
    throw ConfigError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

int main(int argc, char** argv)
{
  CLI::App app{"DV-Ext machine simulator and user-level hypervisor benchmarks"};
  app.require_subcommand(1);
  std::string dir_flag;
  app.add_option("--scenario-dir", dir_flag, "Where scenario names are looked up");

  auto* run = app.add_subcommand("run", "Run a scenario and price its trace");
  std::string scenario_arg, model_path, format = "text", out_path = "-", exit_log, trace_path;
  std::uint64_t seed = 1;
  std::optional<std::uint64_t> reps;
  run->add_option("scenario", scenario_arg, "Scenario file or name")->required();
  run->add_option("--cost-model", model_path, "Cost model JSON (built-in calibration if omitted)");
  run->add_option("--seed", seed, "Interleaving and packet seed");
  run->add_option("--format", format, "csv, json or text")->check(CLI::IsMember({"csv", "json", "text"}));
  run->add_option("--out", out_path, "Report destination, - for stdout");
  run->add_option("--exit-log", exit_log, "Write one CSV row per VM exit");
  run->add_option("--trace", trace_path, "Write the full event trace as CSV");
  run->add_option("--reps", reps, "Override the scenario's repetition count");

  auto* list = app.add_subcommand("list-scenarios", "List scenarios in the scenario directory");
  app.add_subcommand("dump-access-table", "Print the DV register access rules as CSV");
  auto* dump_model = app.add_subcommand("dump-cost-model", "Print the built-in cost model");

  auto* disasm = app.add_subcommand("disasm", "Assemble a guest program and print its listing");
  std::string guest_arg;
  disasm->add_option("guest", guest_arg, "Guest source file or canned:<name>")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto model = model_path.empty() ? bench::CostModel::defaults() : bench::CostModel::load(model_path);
      const auto scenario = bench::load_scenario(resolve_scenario(scenario_arg, scenario_dir(dir_flag)));
      bench::RunOptions opts;
      opts.repetitions = reps;
      opts.keep_exit_log = !exit_log.empty();
      const auto result = bench::run_scenario(scenario, model, seed, opts);
      bench::write_output(out_path, bench::render(result.report, bench::format_from_string(format)));
      if (!exit_log.empty())
        bench::write_output(exit_log, bench::exit_log_csv(result.exits));
      if (!trace_path.empty())
        bench::write_output(trace_path, result.trace.to_csv());
      if (!result.report.completed) {
        std::cerr << "warning: run did not complete (" << result.stats.stop_reason << ")\n";
        return 3;
      }
    } else if (*list) {
      const auto dir = scenario_dir(dir_flag);
      std::vector<std::pair<std::string, std::string>> rows;
      for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() != ".json")
          continue;
        try {
          const auto s = bench::load_scenario(entry.path());
          rows.emplace_back(s.name, std::string(bench::to_string(s.measure)) + ", " +
                                        std::to_string(s.repetitions) + " reps, " + std::to_string(s.vms.size()) +
                                        " vm");
        } catch (const ConfigError& e) {
          rows.emplace_back(entry.path().stem().string(), std::string("invalid: ") + e.what());
        }
      }
      std::sort(rows.begin(), rows.end());
      for (const auto& [name, what] : rows)
        std::cout << name << '\t' << what << '\n';
    } else if (app.got_subcommand("dump-access-table")) {
      std::cout << hw::access_table_csv();
    } else if (*dump_model) {
      std::cout << bench::CostModel::defaults().to_json();
    } else if (*disasm) {
      std::string source;
      if (guest_arg.rfind("canned:", 0) == 0) {
        auto src = guest::canned_source(guest_arg.substr(7));
        if (!src)
          throw ConfigError("no built-in guest \"" + guest_arg.substr(7) + "\"");
        source = guest::substitute(*src, {{"REPS", "100000"}, {"ROUNDS", "50000"}});
      } else {
        source = read_file(guest_arg);
      }
      std::cout << guest::disassemble(guest::assemble(source));
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
