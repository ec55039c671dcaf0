#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "duvisor/pvio/virtqueue.hpp"

namespace duvisor::pvio {

/// One entry of an RX injection schedule.
struct PacketSpec
{
  std::uint64_t cycle = 0;
  std::uint32_t length = 0;
  std::uint64_t seed = 0;

  bool operator==(const PacketSpec&) const = default;
};

/// Payload bytes are a pure function of (length, seed).
std::vector<std::uint8_t> packet_payload(const PacketSpec& p);
std::uint64_t payload_checksum(std::span<const std::uint8_t> bytes);

/// The simulated wire: hands out packets whose arrival cycle has passed.
class PacketSource
{
public:
  PacketSource() = default;
  explicit PacketSource(std::vector<PacketSpec> schedule);

  /// `count` packets starting at `start`, gaps of spacing +/- 25%, lengths
  /// uniform in [min_len, max_len].
  static std::vector<PacketSpec> generate(std::size_t count, std::uint64_t start, std::uint64_t spacing,
                                          std::uint32_t min_len, std::uint32_t max_len, std::uint64_t seed);
  /// Text schedule, one "cycle length seed" triple per line; '#' comments.
  static std::vector<PacketSpec> load(const std::filesystem::path& path);

  std::optional<std::uint64_t> next_cycle() const;
  std::vector<PacketSpec> take_due(std::uint64_t now);
  std::size_t remaining() const { return schedule_.size() - next_; }
  std::size_t total() const { return schedule_.size(); }

private:
  std::vector<PacketSpec> schedule_;
  std::size_t next_ = 0;
};

/// Outcome of one backend service pass.
struct ServiceResult
{
  bool progress = false;
  std::size_t completed = 0;
  /// A stage-2 miss or PMC refusal met while touching guest memory. The
  /// pass stopped cleanly before the faulting access and can be retried.
  std::optional<mmu::Fault> fault;
};

struct NetStats
{
  std::uint64_t injected = 0;
  std::uint64_t delivered = 0;
  std::uint64_t dropped_overflow = 0;
  std::uint64_t dropped_oversize = 0;
  std::uint64_t notifications = 0;
  std::uint64_t tx_packets = 0;
  std::vector<std::uint64_t> delivered_checksums;
  std::vector<std::uint64_t> tx_checksums;
  /// Descriptor ids in the order the RX side consumed them.
  std::vector<std::uint16_t> consumed;
};

/// Common virtio-mmio register block.
class VirtioMmio
{
public:
  explicit VirtioMmio(std::uint32_t device_id) : device_id_(device_id) {}

  std::uint64_t read(std::uint64_t offset) const;
  /// Returns the queue index for a QUEUE_NOTIFY store.
  std::optional<unsigned> write(std::uint64_t offset, std::uint64_t value);
  void raise() { int_status_ |= 1; }

private:
  std::uint32_t device_id_;
  std::uint32_t int_status_ = 0;
};

class NetBackend
{
public:
  NetBackend(DeviceLayout layout, PacketSource source, std::size_t pending_cap = 1024,
             std::size_t batch = 64);

  const DeviceLayout& layout() const { return layout_; }
  VirtioMmio& mmio() { return mmio_; }

  /// One RX polling pass: admit due packets, fill posted buffers, publish the
  /// used index and call `notify` once if anything landed.
  ServiceResult rx_poll(GpaAccess& mem, std::uint64_t now, const std::function<void()>& notify);
  /// Drains TX descriptors after a kick.
  ServiceResult tx_drain(GpaAccess& mem);

  void kick(unsigned queue);
  bool tx_pending() const { return tx_kicked_; }
  bool rx_busy(std::uint64_t now) const;
  std::optional<std::uint64_t> next_arrival() const { return source_.next_cycle(); }
  std::size_t pending() const { return pending_.size(); }
  const NetStats& stats() const { return stats_; }

private:
  DeviceLayout layout_;
  PacketSource source_;
  std::size_t pending_cap_;
  std::size_t batch_;
  std::deque<PacketSpec> pending_;
  std::uint16_t last_rx_avail_ = 0;
  std::uint16_t last_tx_avail_ = 0;
  bool tx_kicked_ = false;
  VirtioMmio mmio_{1};
  NetStats stats_;
};

inline constexpr std::uint32_t kSectorSize = 512;

namespace blk {
inline constexpr std::uint32_t kIn = 0;   // read from disk
inline constexpr std::uint32_t kOut = 1;  // write to disk
inline constexpr std::uint8_t kStatusOk = 0;
inline constexpr std::uint8_t kStatusIoErr = 1;
inline constexpr std::uint8_t kStatusUnsupported = 2;
} // namespace blk

struct BlkStats
{
  std::uint64_t requests = 0;
  std::uint64_t errors = 0;
  std::uint64_t notifications = 0;
};

/// Flat-image block device; requests are three-descriptor chains of
/// header, data and status.
class BlkBackend
{
public:
  BlkBackend(DeviceLayout layout, std::vector<std::uint8_t> image);

  static std::vector<std::uint8_t> load_image(const std::filesystem::path& path);
  void save_image(const std::filesystem::path& path) const;

  const DeviceLayout& layout() const { return layout_; }
  VirtioMmio& mmio() { return mmio_; }
  void kick(unsigned queue);
  bool pending() const { return kicked_; }
  ServiceResult process(GpaAccess& mem, const std::function<void()>& notify);

  const std::vector<std::uint8_t>& image() const { return image_; }
  const BlkStats& stats() const { return stats_; }

private:
  DeviceLayout layout_;
  std::vector<std::uint8_t> image_;
  std::uint16_t last_avail_ = 0;
  bool kicked_ = false;
  VirtioMmio mmio_{2};
  BlkStats stats_;
};

/// Character console: DATA stores append to the output, STATUS reads 1.
class Console
{
public:
  std::uint64_t read(std::uint64_t offset) const;
  void write(std::uint64_t offset, std::uint64_t value);
  const std::string& output() const { return output_; }

private:
  std::string output_;
};

} // namespace duvisor::pvio
