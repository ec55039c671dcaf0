#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "duvisor/hw/types.hpp"
#include "duvisor/pvio/virtqueue.hpp"

namespace duvisor::guest {

/// Guest code starts here in both the virtual and physical address spaces.
inline constexpr std::uint64_t kCodeBase = 0x8000'0000;
inline constexpr std::uint64_t kInstrBytes = 8;
inline constexpr unsigned kRegs = 32;
/// Hypercall calling convention: number in r17, argument and result in r10.
inline constexpr unsigned kRegNr = 17;
inline constexpr unsigned kRegArg = 10;
/// Guest driver macros keep their running tallies here.
inline constexpr unsigned kRegRxCount = 20;
inline constexpr unsigned kRegRxSum = 21;

namespace hcall {
inline constexpr std::uint64_t kNull = 0;
inline constexpr std::uint64_t kVipi = 1;
inline constexpr std::uint64_t kHalt = 2;
inline constexpr std::uint64_t kErrUnknown = ~std::uint64_t{0};
} // namespace hcall

enum class Op : std::uint8_t
{
  Nop,
  Li,
  Addi,
  Load,
  Store,
  MmioLoad,
  MmioStore,
  Hypercall,
  Wfi,
  IrqAck,
  LoopBegin,
  LoopEnd,
  Halt,
  VioPost,
  VioReap,
  VioSend,
  VioBlk,
};

/// One decoded instruction. Field use depends on `op`:
///  Li rd, imm / Addi rd, rs, imm
///  Load rd, addr | imm(rs)  / Store rd, addr | imm(rs)   (based = register form)
///  MmioLoad rd, addr / MmioStore rd, addr                (addr is a GPA)
///  Stores take their value from rd.
///  Hypercall imm[, addr]                                 (nr, argument)
///  LoopBegin imm (count), partner = LoopEnd index; LoopEnd partner = LoopBegin index
///  VioPost dev, queue, imm / VioReap dev, queue / VioSend dev, imm (length)
///  VioBlk write?, imm (sector), addr (sector count)
struct Instr
{
  Op op = Op::Nop;
  std::uint8_t rd = 0;
  std::uint8_t rs = 0;
  std::uint8_t width = 8;
  bool based = false;
  bool has_arg = false;
  bool write = false;
  pvio::DeviceKind dev = pvio::DeviceKind::Console;
  std::uint8_t queue = 0;
  std::int64_t imm = 0;
  std::uint64_t addr = 0;
  std::uint32_t partner = 0;

  bool operator==(const Instr&) const = default;
};

enum class S1Mode : std::uint8_t { None, Identity, Explicit };

struct S1Map
{
  std::uint64_t gva = 0;
  std::uint64_t gpa = 0;
  std::uint8_t perms = 0;

  bool operator==(const S1Map&) const = default;
};

struct Program
{
  std::vector<Instr> code;
  S1Mode s1 = S1Mode::None;
  std::vector<S1Map> maps;
  std::vector<std::uint8_t> data;
  /// vCPU id -> index of its first instruction. vCPUs without an entry
  /// start at instruction 0.
  std::map<std::uint32_t, std::uint32_t> entries;

  std::uint64_t code_bytes() const { return code.size() * kInstrBytes; }
  /// GPA of the data blob: the first page after the code.
  std::uint64_t data_base() const;
  std::uint64_t image_bytes() const;
  std::uint64_t entry_pc(std::uint32_t vcpu) const;

  bool operator==(const Program&) const = default;
};

class AssemblyError : public ConfigError
{
public:
  AssemblyError(std::size_t line, const std::string& msg);
  std::size_t line() const { return line_; }

private:
  std::size_t line_;
};

/// Replaces every `$NAME` with its value; unknown names are an error.
std::string substitute(std::string_view source, const std::map<std::string, std::string>& vars);

Program assemble(std::string_view source);
/// Source text that assembles back to an equal program.
std::string disassemble(const Program& p);
std::string disassemble(const Instr& i);

} // namespace duvisor::guest
