#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <optional>
#include <sstream>

#include "duvisor/guest/isa.hpp"
#include "duvisor/mmu/page_table.hpp"

namespace duvisor::guest {

namespace {

std::string trim(std::string_view s)
{
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b])))
    ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1])))
    --e;
  return std::string(s.substr(b, e - b));
}

std::string upper(std::string s)
{
  for (auto& c : s)
    c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string lower(std::string s)
{
  for (auto& c : s)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

struct Statement
{
  std::size_t line;
  std::string text;
};

std::vector<Statement> split_statements(std::string_view source)
{
  std::vector<Statement> out;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos <= source.size()) {
    std::size_t nl = source.find('\n', pos);
    if (nl == std::string_view::npos)
      nl = source.size();
    std::string line(source.substr(pos, nl - pos));
    pos = nl + 1;
    ++lineno;
    // Strings inside DATA "..." may hold comment characters; look past them.
    bool in_str = false;
    std::size_t cut = line.size();
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"')
        in_str = !in_str;
      if (in_str)
        continue;
      if (line[i] == '#' || (line[i] == '/' && i + 1 < line.size() && line[i + 1] == '/')) {
        cut = i;
        break;
      }
    }
    line.resize(cut);
    std::string expanded;
    in_str = false;
    for (char c : line) {
      if (c == '"')
        in_str = !in_str;
      if (!in_str && c == '{')
        expanded += " {;";
      else if (!in_str && c == '}')
        expanded += ";};";
      else
        expanded += c;
    }
    std::size_t s = 0;
    in_str = false;
    for (std::size_t i = 0; i <= expanded.size(); ++i) {
      if (i < expanded.size() && expanded[i] == '"')
        in_str = !in_str;
      if (i == expanded.size() || (!in_str && expanded[i] == ';')) {
        auto t = trim(std::string_view(expanded).substr(s, i - s));
        if (!t.empty())
          out.push_back({lineno, t});
        s = i + 1;
      }
    }
    if (nl == source.size())
      break;
  }
  return out;
}

std::vector<std::string> split_operands(const std::string& s)
{
  std::vector<std::string> out;
  if (trim(s).empty())
    return out;
  std::string cur;
  bool in_str = false;
  for (char c : s) {
    if (c == '"')
      in_str = !in_str;
    if (c == ',' && !in_str) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

class Parser
{
public:
  explicit Parser(std::size_t line) : line_(line) {}

  [[noreturn]] void fail(const std::string& msg) const { throw AssemblyError(line_, msg); }

  std::int64_t number(const std::string& tok) const
  {
    std::string t;
    for (char c : tok)
      if (c != '_')
        t += c;
    bool neg = false;
    std::string_view v = t;
    if (!v.empty() && (v[0] == '-' || v[0] == '+')) {
      neg = v[0] == '-';
      v.remove_prefix(1);
    }
    int base = 10;
    if (v.size() > 2 && v[0] == '0' && (v[1] == 'x' || v[1] == 'X')) {
      base = 16;
      v.remove_prefix(2);
    }
    std::uint64_t u = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), u, base);
    if (v.empty() || ec != std::errc() || p != v.data() + v.size())
      fail("bad number '" + tok + "'");
    if (!neg && u > static_cast<std::uint64_t>(INT64_MAX))
      return static_cast<std::int64_t>(u);
    return neg ? -static_cast<std::int64_t>(u) : static_cast<std::int64_t>(u);
  }

  std::uint64_t unsigned_number(const std::string& tok) const
  {
    const auto v = number(tok);
    if (v < 0 && tok.find('-') != std::string::npos)
      fail("expected a non-negative value, got '" + tok + "'");
    return static_cast<std::uint64_t>(v);
  }

  std::uint64_t address(const std::string& tok) const
  {
    const auto a = unsigned_number(tok);
    if (a >= mmu::kAddrLimit)
      fail("address overflow: " + tok + " is beyond the 39-bit guest space");
    return a;
  }

  std::uint8_t reg(const std::string& tok) const
  {
    const auto t = lower(tok);
    if (t.size() < 2 || t[0] != 'r')
      fail("expected a register, got '" + tok + "'");
    unsigned n = 0;
    auto [p, ec] = std::from_chars(t.data() + 1, t.data() + t.size(), n);
    if (ec != std::errc() || p != t.data() + t.size() || n >= kRegs)
      fail("bad register '" + tok + "'");
    return static_cast<std::uint8_t>(n);
  }

  pvio::DeviceKind device(const std::string& tok) const
  {
    auto d = pvio::device_from_string(lower(tok));
    if (!d)
      fail("unknown device '" + tok + "'");
    return *d;
  }

  std::uint8_t perms(const std::string& tok) const
  {
    std::uint8_t p = 0;
    for (char c : lower(tok)) {
      if (c == 'r')
        p |= mmu::kPermR;
      else if (c == 'w')
        p |= mmu::kPermW;
      else if (c == 'x')
        p |= mmu::kPermX;
      else if (c != '-')
        fail("bad permission string '" + tok + "'");
    }
    if (p == 0)
      fail("empty permissions");
    return p;
  }

  /// "addr" or "imm(rN)".
  void mem_operand(const std::string& tok, Instr& i) const
  {
    const auto open = tok.find('(');
    if (open == std::string::npos) {
      i.addr = address(tok);
      return;
    }
    if (tok.back() != ')')
      fail("bad memory operand '" + tok + "'");
    i.based = true;
    const auto off = trim(std::string_view(tok).substr(0, open));
    i.imm = off.empty() ? 0 : number(off);
    i.rs = reg(trim(std::string_view(tok).substr(open + 1, tok.size() - open - 2)));
  }

  void arity(const std::vector<std::string>& ops, std::size_t lo, std::size_t hi,
             const std::string& mnemonic) const
  {
    if (ops.size() < lo || ops.size() > hi)
      fail(mnemonic + " takes " +
           (lo == hi ? std::to_string(lo) : std::to_string(lo) + "-" + std::to_string(hi)) +
           " operand(s), got " + std::to_string(ops.size()));
  }

private:
  std::size_t line_;
};

std::uint8_t width_from_suffix(const std::string& suffix, const Parser& p)
{
  if (suffix.empty() || suffix == "D")
    return 8;
  if (suffix == "B")
    return 1;
  if (suffix == "H")
    return 2;
  if (suffix == "W")
    return 4;
  p.fail("bad width suffix '." + suffix + "'");
}

std::vector<std::uint8_t> parse_data(const std::string& text, const Parser& p)
{
  std::vector<std::uint8_t> out;
  const auto t = trim(text);
  if (!t.empty() && t.front() == '"') {
    if (t.size() < 2 || t.back() != '"')
      p.fail("unterminated string");
    for (std::size_t i = 1; i + 1 < t.size(); ++i)
      out.push_back(static_cast<std::uint8_t>(t[i]));
    return out;
  }
  std::string hex;
  for (char c : t)
    if (!std::isspace(static_cast<unsigned char>(c)))
      hex += c;
  if (hex.size() > 2 && hex[0] == '0' && (hex[1] == 'x' || hex[1] == 'X'))
    hex.erase(0, 2);
  if (hex.empty() || hex.size() % 2 != 0)
    p.fail("DATA needs an even number of hex digits or a quoted string");
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    unsigned v = 0;
    auto [q, ec] = std::from_chars(hex.data() + i, hex.data() + i + 2, v, 16);
    if (ec != std::errc() || q != hex.data() + i + 2)
      p.fail("bad hex byte in DATA");
    out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

} // namespace

AssemblyError::AssemblyError(std::size_t line, const std::string& msg)
  : ConfigError("line " + std::to_string(line) + ": " + msg), line_(line)
{}

std::uint64_t Program::data_base() const
{
  return kCodeBase + ((code_bytes() + mmu::kPageSize - 1) & ~(mmu::kPageSize - 1));
}

std::uint64_t Program::image_bytes() const
{
  return data_base() - kCodeBase + data.size();
}

std::uint64_t Program::entry_pc(std::uint32_t vcpu) const
{
  auto it = entries.find(vcpu);
  return kCodeBase + kInstrBytes * (it == entries.end() ? 0 : it->second);
}

std::string substitute(std::string_view source, const std::map<std::string, std::string>& vars)
{
  std::string out;
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (source[i] != '$') {
      out += source[i];
      continue;
    }
    std::size_t j = i + 1;
    while (j < source.size() &&
           (std::isalnum(static_cast<unsigned char>(source[j])) || source[j] == '_'))
      ++j;
    const std::string name(source.substr(i + 1, j - i - 1));
    auto it = vars.find(name);
    if (name.empty() || it == vars.end())
      throw ConfigError("undefined guest source variable $" + name);
    out += it->second;
    i = j - 1;
  }
  return out;
}

Program assemble(std::string_view source)
{
  Program prog;
  std::vector<std::pair<std::uint32_t, std::size_t>> loops;  // (begin index, line)
  bool explicit_s1 = false;

  for (const auto& st : split_statements(source)) {
    Parser p(st.line);
    if (st.text == "}") {
      if (loops.empty())
        p.fail("'}' without an open LOOP");
      const auto begin = loops.back().first;
      loops.pop_back();
      Instr end;
      end.op = Op::LoopEnd;
      end.partner = begin;
      prog.code[begin].partner = static_cast<std::uint32_t>(prog.code.size());
      prog.code.push_back(end);
      continue;
    }
    std::size_t sp = 0;
    while (sp < st.text.size() && !std::isspace(static_cast<unsigned char>(st.text[sp])))
      ++sp;
    std::string mnem = upper(st.text.substr(0, sp));
    std::string rest = trim(std::string_view(st.text).substr(sp));
    std::string suffix;
    if (auto dot = mnem.find('.'); dot != std::string::npos) {
      suffix = mnem.substr(dot + 1);
      mnem.resize(dot);
    }
    const bool widthy = mnem == "LOAD" || mnem == "STORE" || mnem == "MMIO_LOAD" || mnem == "MMIO_STORE";
    if (!suffix.empty() && !widthy)
      p.fail(mnem + " takes no width suffix");

    if (mnem == "DATA") {
      auto bytes = parse_data(rest, p);
      prog.data.insert(prog.data.end(), bytes.begin(), bytes.end());
      continue;
    }
    if (mnem == "LOOP") {
      if (rest.empty() || rest.back() != '{')
        p.fail("LOOP needs a body: LOOP <count> { ... }");
      rest = trim(std::string_view(rest).substr(0, rest.size() - 1));
    }
    const auto ops = split_operands(rest);

    if (mnem == "ENTRY") {
      p.arity(ops, 1, 1, mnem);
      const auto v = p.unsigned_number(ops[0]);
      if (!prog.entries.emplace(static_cast<std::uint32_t>(v), static_cast<std::uint32_t>(prog.code.size())).second)
        p.fail("duplicate ENTRY for vCPU " + ops[0]);
      continue;
    }
    if (mnem == "S1") {
      p.arity(ops, 1, 1, mnem);
      const auto mode = lower(ops[0]);
      if (mode == "none")
        prog.s1 = S1Mode::None;
      else if (mode == "identity")
        prog.s1 = S1Mode::Identity;
      else
        p.fail("S1 mode must be none or identity");
      continue;
    }
    if (mnem == "MAP") {
      p.arity(ops, 3, 3, mnem);
      S1Map m{p.address(ops[0]), p.address(ops[1]), p.perms(ops[2])};
      if (!mmu::page_aligned(m.gva) || !mmu::page_aligned(m.gpa))
        p.fail("MAP addresses must be page-aligned");
      prog.maps.push_back(m);
      explicit_s1 = true;
      continue;
    }

    Instr i;
    if (mnem == "NOP") {
      p.arity(ops, 0, 0, mnem);
      i.op = Op::Nop;
    } else if (mnem == "LI") {
      p.arity(ops, 2, 2, mnem);
      i.op = Op::Li;
      i.rd = p.reg(ops[0]);
      i.imm = p.number(ops[1]);
    } else if (mnem == "ADDI") {
      p.arity(ops, 3, 3, mnem);
      i.op = Op::Addi;
      i.rd = p.reg(ops[0]);
      i.rs = p.reg(ops[1]);
      i.imm = p.number(ops[2]);
    } else if (mnem == "LOAD" || mnem == "STORE") {
      p.arity(ops, 2, 2, mnem);
      i.op = mnem == "LOAD" ? Op::Load : Op::Store;
      i.width = width_from_suffix(suffix, p);
      i.rd = p.reg(ops[0]);
      p.mem_operand(ops[1], i);
    } else if (mnem == "MMIO_LOAD" || mnem == "MMIO_STORE") {
      p.arity(ops, 2, 2, mnem);
      i.op = mnem == "MMIO_LOAD" ? Op::MmioLoad : Op::MmioStore;
      i.width = width_from_suffix(suffix, p);
      i.rd = p.reg(ops[0]);
      i.addr = p.address(ops[1]);
    } else if (mnem == "HYPERCALL") {
      p.arity(ops, 1, 2, mnem);
      i.op = Op::Hypercall;
      i.imm = static_cast<std::int64_t>(p.unsigned_number(ops[0]));
      if (ops.size() == 2) {
        i.has_arg = true;
        i.addr = p.unsigned_number(ops[1]);
      }
    } else if (mnem == "SEND_VIPI") {
      p.arity(ops, 1, 1, mnem);
      i.op = Op::Hypercall;
      i.imm = static_cast<std::int64_t>(hcall::kVipi);
      i.has_arg = true;
      i.addr = p.unsigned_number(ops[0]);
    } else if (mnem == "WFI") {
      p.arity(ops, 0, 0, mnem);
      i.op = Op::Wfi;
    } else if (mnem == "IRQ_ACK") {
      p.arity(ops, 0, 1, mnem);
      i.op = Op::IrqAck;
      i.rd = ops.empty() ? static_cast<std::uint8_t>(kRegArg) : p.reg(ops[0]);
    } else if (mnem == "LOOP") {
      p.arity(ops, 1, 1, mnem);
      i.op = Op::LoopBegin;
      i.imm = static_cast<std::int64_t>(p.unsigned_number(ops[0]));
      loops.emplace_back(static_cast<std::uint32_t>(prog.code.size()), st.line);
    } else if (mnem == "HALT") {
      p.arity(ops, 0, 0, mnem);
      i.op = Op::Halt;
    } else if (mnem == "VIO_POST") {
      p.arity(ops, 3, 3, mnem);
      i.op = Op::VioPost;
      i.dev = p.device(ops[0]);
      i.queue = static_cast<std::uint8_t>(p.unsigned_number(ops[1]));
      i.imm = static_cast<std::int64_t>(p.unsigned_number(ops[2]));
      if (i.imm == 0 || i.imm > pvio::kQueueSize)
        p.fail("VIO_POST count must be 1..256");
    } else if (mnem == "VIO_REAP") {
      p.arity(ops, 2, 2, mnem);
      i.op = Op::VioReap;
      i.dev = p.device(ops[0]);
      i.queue = static_cast<std::uint8_t>(p.unsigned_number(ops[1]));
    } else if (mnem == "VIO_SEND") {
      p.arity(ops, 2, 2, mnem);
      i.op = Op::VioSend;
      i.dev = p.device(ops[0]);
      i.imm = static_cast<std::int64_t>(p.unsigned_number(ops[1]));
      if (i.imm == 0 || i.imm > 2048)
        p.fail("VIO_SEND length must be 1..2048");
    } else if (mnem == "VIO_BLK") {
      p.arity(ops, 3, 3, mnem);
      i.op = Op::VioBlk;
      i.dev = pvio::DeviceKind::Blk;
      const auto dir = lower(ops[0]);
      if (dir != "read" && dir != "write")
        p.fail("VIO_BLK direction must be read or write");
      i.write = dir == "write";
      i.imm = static_cast<std::int64_t>(p.unsigned_number(ops[1]));
      i.addr = p.unsigned_number(ops[2]);
      if (i.addr == 0 || i.addr > 8)
        p.fail("VIO_BLK sector count must be 1..8");
    } else {
      p.fail("unknown mnemonic '" + mnem + "'");
    }
    prog.code.push_back(i);
  }
  if (!loops.empty())
    throw AssemblyError(loops.back().second, "LOOP without closing '}'");
  if (explicit_s1) {
    if (prog.s1 == S1Mode::Identity)
      throw AssemblyError(0, "MAP cannot be combined with S1 identity");
    prog.s1 = S1Mode::Explicit;
  }
  for (const auto& [vcpu, idx] : prog.entries)
    if (idx >= prog.code.size())
      throw AssemblyError(0, "ENTRY " + std::to_string(vcpu) + " has no instructions after it");
  return prog;
}

namespace {

std::string hex(std::uint64_t v)
{
  char buf[32];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

const char* width_suffix(std::uint8_t w)
{
  switch (w) {
    case 1: return ".b";
    case 2: return ".h";
    case 4: return ".w";
    default: return "";
  }
}

std::string reg(std::uint8_t r)
{
  return "r" + std::to_string(r);
}

} // namespace

std::string disassemble(const Instr& i)
{
  const std::string dev(pvio::to_string(i.dev));
  auto mem = [&] {
    return i.based ? std::to_string(i.imm) + "(" + reg(i.rs) + ")" : hex(i.addr);
  };
  switch (i.op) {
    case Op::Nop: return "NOP";
    case Op::Li: return "LI " + reg(i.rd) + ", " + std::to_string(i.imm);
    case Op::Addi: return "ADDI " + reg(i.rd) + ", " + reg(i.rs) + ", " + std::to_string(i.imm);
    case Op::Load: return std::string("LOAD") + width_suffix(i.width) + " " + reg(i.rd) + ", " + mem();
    case Op::Store: return std::string("STORE") + width_suffix(i.width) + " " + reg(i.rd) + ", " + mem();
    case Op::MmioLoad:
      return std::string("MMIO_LOAD") + width_suffix(i.width) + " " + reg(i.rd) + ", " + hex(i.addr);
    case Op::MmioStore:
      return std::string("MMIO_STORE") + width_suffix(i.width) + " " + reg(i.rd) + ", " + hex(i.addr);
    case Op::Hypercall:
      return "HYPERCALL " + std::to_string(i.imm) + (i.has_arg ? ", " + std::to_string(i.addr) : "");
    case Op::Wfi: return "WFI";
    case Op::IrqAck: return "IRQ_ACK " + reg(i.rd);
    case Op::LoopBegin: return "LOOP " + std::to_string(i.imm) + " {";
    case Op::LoopEnd: return "}";
    case Op::Halt: return "HALT";
    case Op::VioPost: return "VIO_POST " + dev + ", " + std::to_string(i.queue) + ", " + std::to_string(i.imm);
    case Op::VioReap: return "VIO_REAP " + dev + ", " + std::to_string(i.queue);
    case Op::VioSend: return "VIO_SEND " + dev + ", " + std::to_string(i.imm);
    case Op::VioBlk:
      return std::string("VIO_BLK ") + (i.write ? "write" : "read") + ", " + std::to_string(i.imm) + ", " +
             std::to_string(i.addr);
  }
  return "?";
}

std::string disassemble(const Program& p)
{
  std::ostringstream os;
  if (p.s1 == S1Mode::Identity)
    os << "S1 identity\n";
  for (const auto& m : p.maps)
    os << "MAP " << hex(m.gva) << ", " << hex(m.gpa) << ", " << mmu::perms_string(m.perms) << "\n";
  if (!p.data.empty()) {
    os << "DATA ";
    char b[3];
    for (auto byte : p.data) {
      std::snprintf(b, sizeof b, "%02x", byte);
      os << b;
    }
    os << "\n";
  }
  std::map<std::uint32_t, std::vector<std::uint32_t>> entries_at;
  for (const auto& [vcpu, idx] : p.entries)
    entries_at[idx].push_back(vcpu);
  int depth = 0;
  for (std::size_t n = 0; n < p.code.size(); ++n) {
    if (auto it = entries_at.find(static_cast<std::uint32_t>(n)); it != entries_at.end())
      for (auto v : it->second)
        os << "ENTRY " << v << "\n";
    const auto& i = p.code[n];
    if (i.op == Op::LoopEnd)
      --depth;
    char addr[24];
    std::snprintf(addr, sizeof addr, "%08llx",
                  static_cast<unsigned long long>(kCodeBase + n * kInstrBytes));
    os << std::string(static_cast<std::size_t>(std::max(depth, 0)) * 2, ' ') << disassemble(i) << "  # "
       << addr << "\n";
    if (i.op == Op::LoopBegin)
      ++depth;
  }
  return os.str();
}

} // namespace duvisor::guest
