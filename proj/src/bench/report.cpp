#include "duvisor/bench/report.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace duvisor::bench {

using nlohmann::json;

namespace {

std::string fixed(double v, int digits = 2)
{
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

json arch_json(const ArchTotals& t)
{
  return {{"per_op", t.per_op}, {"total", t.total}, {"background", t.background}, {"charges", t.charges}};
}

ArchTotals arch_from(const json& j)
{
  ArchTotals t;
  t.per_op = j.at("per_op").get<std::map<std::string, double>>();
  t.total = j.at("total").get<double>();
  t.background = j.at("background").get<double>();
  t.charges = j.at("charges").get<std::map<std::string, std::uint64_t>>();
  return t;
}

std::string group_of(const BenchReport& r, const std::string& seg)
{
  auto it = r.model.segments.find(seg);
  return it == r.model.segments.end() || it->second.group.empty() ? seg : it->second.group;
}

} // namespace

Format format_from_string(const std::string& s)
{
  if (s == "csv")
    return Format::Csv;
  if (s == "json")
    return Format::Json;
  if (s == "text")
    return Format::Text;
  throw ConfigError("format must be csv, json or text");
}

std::string to_csv(const BenchReport& r)
{
  std::set<std::string> segs;
  for (const auto& [s, _] : r.kvm.per_op)
    segs.insert(s);
  for (const auto& [s, _] : r.duv.per_op)
    segs.insert(s);
  std::ostringstream os;
  os << "scenario,seed,ops,kvm_total,duv_total,improvement_pct,saved_cycles";
  for (const auto& s : segs)
    os << ",kvm." << s;
  for (const auto& s : segs)
    os << ",duv." << s;
  os << '\n';
  os << r.scenario << ',' << r.seed << ',' << r.ops << ',' << fixed(r.kvm.total) << ',' << fixed(r.duv.total) << ','
     << fixed(r.improvement_pct) << ',' << fixed(r.saved_cycles);
  for (const auto* t : {&r.kvm, &r.duv})
    for (const auto& s : segs) {
      auto it = t->per_op.find(s);
      os << ',' << fixed(it == t->per_op.end() ? 0.0 : it->second);
    }
  os << '\n';
  return os.str();
}

std::string to_json(const BenchReport& r)
{
  json j;
  j["format"] = kReportFormat;
  j["scenario"] = r.scenario;
  j["measure"] = r.measure;
  j["seed"] = r.seed;
  j["repetitions"] = r.repetitions;
  j["ops"] = r.ops;
  j["completed"] = r.completed;
  j["kvm"] = arch_json(r.kvm);
  j["duvisor"] = arch_json(r.duv);
  j["improvement_pct"] = r.improvement_pct;
  j["saved_cycles"] = r.saved_cycles;
  j["exits_by_reason"] = r.exits_by_reason;
  j["events"] = r.events;
  j["trace_digest"] = r.trace_digest;
  j["steps"] = r.steps;
  j["cycles"] = r.cycles;
  j["cost_model"] = json::parse(r.model.to_json());
  return j.dump(2) + "\n";
}

BenchReport report_from_json(const std::string& text)
{
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("report is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != kReportFormat)
    throw ConfigError(std::string("report must carry format \"") + kReportFormat + "\"");
  BenchReport r;
  try {
    r.scenario = j.at("scenario").get<std::string>();
    r.measure = j.at("measure").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.repetitions = j.at("repetitions").get<std::uint64_t>();
    r.ops = j.at("ops").get<std::uint64_t>();
    r.completed = j.at("completed").get<bool>();
    r.kvm = arch_from(j.at("kvm"));
    r.duv = arch_from(j.at("duvisor"));
    r.improvement_pct = j.at("improvement_pct").get<double>();
    r.saved_cycles = j.at("saved_cycles").get<double>();
    r.exits_by_reason = j.at("exits_by_reason").get<std::map<std::string, std::uint64_t>>();
    r.events = j.at("events").get<std::uint64_t>();
    r.trace_digest = j.at("trace_digest").get<std::string>();
    r.steps = j.at("steps").get<std::uint64_t>();
    r.cycles = j.at("cycles").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed report: ") + e.what());
  }
  r.model = CostModel::parse(j.at("cost_model").dump());
  return r;
}

std::string to_text(const BenchReport& r)
{
  std::ostringstream os;
  os << "scenario " << r.scenario << "  measure " << r.measure << "  seed " << r.seed << "  ops " << r.ops
     << (r.completed ? "" : "  (INCOMPLETE)") << '\n';
  os << "cost model " << r.model.name << "\n\n";

  // Stacked breakdown by group, one column per path, bars scaled to the
  // larger total.
  std::map<std::string, std::pair<double, double>> groups;
  std::vector<std::string> order;
  auto note = [&](const std::string& g) {
    if (!groups.count(g))
      order.push_back(g);
  };
  for (const auto& [s, c] : r.kvm.per_op) {
    const auto g = group_of(r, s);
    note(g);
    groups[g].first += c;
  }
  for (const auto& [s, c] : r.duv.per_op) {
    const auto g = group_of(r, s);
    note(g);
    groups[g].second += c;
  }
  const double top = std::max(r.kvm.total, r.duv.total);
  constexpr int kWidth = 40;
  for (const auto* name : {"kvm", "duvisor"}) {
    const bool kvm = std::string(name) == "kvm";
    const double total = kvm ? r.kvm.total : r.duv.total;
    os << name << "  " << fixed(total, 1) << " cycles/op\n";
    for (const auto& g : order) {
      const double c = kvm ? groups[g].first : groups[g].second;
      if (c == 0)
        continue;
      const int bar = top > 0 ? static_cast<int>(c / top * kWidth + 0.5) : 0;
      char line[160];
      std::snprintf(line, sizeof line, "  %-12s %10.1f %6.2f%%  ", g.c_str(), c, total > 0 ? 100 * c / total : 0.0);
      os << line << std::string(static_cast<std::size_t>(bar), kvm ? '#' : '=') << '\n';
    }
    os << '\n';
  }
  os << "improvement " << fixed(r.improvement_pct) << "%  saved " << fixed(r.saved_cycles, 1) << " cycles/op\n";
  os << "exits:";
  for (const auto& [reason, n] : r.exits_by_reason)
    os << ' ' << reason << '=' << n;
  os << "\nbackground cycles  kvm " << fixed(r.kvm.background, 0) << "  duvisor " << fixed(r.duv.background, 0)
     << "\ntrace " << r.events << " events, digest " << r.trace_digest << '\n';
  return os.str();
}

std::string render(const BenchReport& r, Format f)
{
  switch (f) {
    case Format::Csv: return to_csv(r);
    case Format::Json: return to_json(r);
    case Format::Text: return to_text(r);
  }
  return {};
}

void write_output(const std::filesystem::path& path, const std::string& content)
{
  if (path.empty() || path == "-") {
    std::cout << content;
    std::cout.flush();
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw std::runtime_error("cannot write " + path.string());
  out << content;
  if (!out)
    throw std::runtime_error("write failed for " + path.string());
}

} // namespace duvisor::bench
