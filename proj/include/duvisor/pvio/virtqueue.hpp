#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "duvisor/mmu/phys_mem.hpp"
#include "duvisor/mmu/translate.hpp"

namespace duvisor::pvio {

enum class DeviceKind : std::uint8_t { Console, Net, Blk };

std::string_view to_string(DeviceKind k);
std::optional<DeviceKind> device_from_string(std::string_view s);

inline constexpr std::uint64_t kConsoleBase = 0x1000'0000;
inline constexpr std::uint64_t kNetBase = 0x1000'1000;
inline constexpr std::uint64_t kBlkBase = 0x1000'2000;
inline constexpr std::uint64_t kMmioWindow = 0x1000;

inline constexpr unsigned kIpiIrq = 1;
inline constexpr unsigned kNetIrq = 2;
inline constexpr unsigned kBlkIrq = 3;

inline constexpr std::uint16_t kQueueSize = 256;
inline constexpr unsigned kNetRx = 0;
inline constexpr unsigned kNetTx = 1;

// virtio-mmio register offsets used by the guest driver and the devices.
namespace reg {
inline constexpr std::uint64_t kMagic = 0x00;
inline constexpr std::uint64_t kDeviceId = 0x08;
inline constexpr std::uint64_t kQueueNotify = 0x50;
inline constexpr std::uint64_t kInterruptStatus = 0x60;
inline constexpr std::uint64_t kInterruptAck = 0x64;
inline constexpr std::uint32_t kMagicValue = 0x7472'6976;  // "virt"
} // namespace reg

namespace console_reg {
inline constexpr std::uint64_t kData = 0x0;
inline constexpr std::uint64_t kStatus = 0x4;
} // namespace console_reg

/// Split-ring placement in guest-physical memory. Descriptor i always points
/// at buffer slot i.
struct QueueLayout
{
  std::uint64_t desc = 0;
  std::uint64_t avail = 0;
  std::uint64_t used = 0;
  std::uint64_t buffers = 0;
  std::uint32_t buf_size = 2048;
  std::uint16_t size = kQueueSize;
  /// Block queues: request headers at aux, status bytes at aux + 4 KiB.
  std::uint64_t aux = 0;

  std::uint64_t buffer(std::uint16_t slot) const { return buffers + std::uint64_t{slot} * buf_size; }
};

struct DeviceLayout
{
  DeviceKind kind = DeviceKind::Console;
  std::uint64_t mmio_base = 0;
  unsigned irq = 0;
  std::vector<QueueLayout> queues;
};

/// Places every device's queues in one area starting at `base`; returns the
/// layouts and the area size in bytes (page multiple).
std::pair<std::vector<DeviceLayout>, std::uint64_t> layout_devices(const std::vector<DeviceKind>& devices,
                                                                   std::uint64_t base);

/// Guest-physical memory seen through a stage-2 walk. Callers probe a range
/// before touching it so that multi-step ring updates never stop half way.
class GpaAccess
{
public:
  using Translator =
      std::function<mmu::TranslateResult(std::uint64_t gpa, mmu::Access access, std::uint64_t len)>;

  GpaAccess(mmu::PhysicalMemory& mem, Translator translate)
    : mem_(mem), translate_(std::move(translate))
  {}

  /// First fault met while translating [gpa, gpa+len) page by page.
  std::optional<mmu::Fault> probe(std::uint64_t gpa, std::uint64_t len, mmu::Access access) const;

  /// Throws std::logic_error when a page does not translate; probe first.
  void read(std::uint64_t gpa, std::span<std::uint8_t> out) const;
  void write(std::uint64_t gpa, std::span<const std::uint8_t> in);
  std::uint64_t read_uint(std::uint64_t gpa, unsigned len) const;
  void write_uint(std::uint64_t gpa, std::uint64_t value, unsigned len);

private:
  std::uint64_t hpa(std::uint64_t gpa, mmu::Access access, std::uint64_t len) const;

  mmu::PhysicalMemory& mem_;
  Translator translate_;
};

namespace ring {

inline constexpr std::uint16_t kDescNext = 1;
inline constexpr std::uint16_t kDescWrite = 2;
inline constexpr std::uint16_t kUsedNoNotify = 1;

struct Desc
{
  std::uint64_t addr = 0;
  std::uint32_t len = 0;
  std::uint16_t flags = 0;
  std::uint16_t next = 0;

  bool operator==(const Desc&) const = default;
};

struct UsedElem
{
  std::uint32_t id = 0;
  std::uint32_t len = 0;
};

std::uint64_t desc_bytes(const QueueLayout& q);
std::uint64_t avail_bytes(const QueueLayout& q);
std::uint64_t used_bytes(const QueueLayout& q);

/// Probes descriptor table, avail ring and used ring for read and write.
std::optional<mmu::Fault> probe_rings(const GpaAccess& m, const QueueLayout& q);

Desc read_desc(const GpaAccess& m, const QueueLayout& q, std::uint16_t i);
void write_desc(GpaAccess& m, const QueueLayout& q, std::uint16_t i, const Desc& d);

std::uint16_t avail_idx(const GpaAccess& m, const QueueLayout& q);
void set_avail_idx(GpaAccess& m, const QueueLayout& q, std::uint16_t idx);
std::uint16_t avail_entry(const GpaAccess& m, const QueueLayout& q, std::uint16_t slot);
void set_avail_entry(GpaAccess& m, const QueueLayout& q, std::uint16_t slot, std::uint16_t desc);

std::uint16_t used_flags(const GpaAccess& m, const QueueLayout& q);
void set_used_flags(GpaAccess& m, const QueueLayout& q, std::uint16_t flags);
std::uint16_t used_idx(const GpaAccess& m, const QueueLayout& q);
void set_used_idx(GpaAccess& m, const QueueLayout& q, std::uint16_t idx);
UsedElem used_entry(const GpaAccess& m, const QueueLayout& q, std::uint16_t slot);
void set_used_entry(GpaAccess& m, const QueueLayout& q, std::uint16_t slot, UsedElem e);

} // namespace ring

} // namespace duvisor::pvio
