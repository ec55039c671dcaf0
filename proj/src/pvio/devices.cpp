#include "duvisor/pvio/devices.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "duvisor/util/hash.hpp"

namespace duvisor::pvio {

using mmu::Access;

std::vector<std::uint8_t> packet_payload(const PacketSpec& p)
{
  std::mt19937_64 rng(p.seed);
  std::vector<std::uint8_t> out(p.length);
  for (std::size_t i = 0; i < out.size(); i += 8) {
    const std::uint64_t word = rng();
    for (std::size_t b = 0; b < 8 && i + b < out.size(); ++b)
      out[i + b] = static_cast<std::uint8_t>(word >> (8 * b));
  }
  return out;
}

std::uint64_t payload_checksum(std::span<const std::uint8_t> bytes)
{
  return fnv1a(bytes.data(), bytes.size());
}

PacketSource::PacketSource(std::vector<PacketSpec> schedule) : schedule_(std::move(schedule))
{
  std::stable_sort(schedule_.begin(), schedule_.end(),
                   [](const PacketSpec& a, const PacketSpec& b) { return a.cycle < b.cycle; });
}

std::vector<PacketSpec> PacketSource::generate(std::size_t count, std::uint64_t start, std::uint64_t spacing,
                                               std::uint32_t min_len, std::uint32_t max_len,
                                               std::uint64_t seed)
{
  if (min_len == 0 || min_len > max_len)
    throw ConfigError("packet lengths need 0 < min_len <= max_len");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> len(min_len, max_len);
  const std::uint64_t jitter = spacing / 4;
  std::uniform_int_distribution<std::uint64_t> gap(spacing - jitter, spacing + jitter);
  std::vector<PacketSpec> out;
  out.reserve(count);
  std::uint64_t at = start;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(PacketSpec{at, len(rng), rng()});
    at += gap(rng);
  }
  return out;
}

std::vector<PacketSpec> PacketSource::load(const std::filesystem::path& path)
{
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open packet schedule " + path.string());
  std::vector<PacketSpec> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos)
      line.erase(hash);
    std::istringstream ss(line);
    PacketSpec p;
    if (!(ss >> p.cycle))
      continue;
    if (!(ss >> p.length >> p.seed) || p.length == 0)
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'cycle length seed'");
    out.push_back(p);
  }
  return out;
}

std::optional<std::uint64_t> PacketSource::next_cycle() const
{
  if (next_ >= schedule_.size())
    return std::nullopt;
  return schedule_[next_].cycle;
}

std::vector<PacketSpec> PacketSource::take_due(std::uint64_t now)
{
  std::vector<PacketSpec> out;
  while (next_ < schedule_.size() && schedule_[next_].cycle <= now)
    out.push_back(schedule_[next_++]);
  return out;
}

std::uint64_t VirtioMmio::read(std::uint64_t offset) const
{
  switch (offset) {
    case reg::kMagic: return reg::kMagicValue;
    case reg::kDeviceId: return device_id_;
    case reg::kInterruptStatus: return int_status_;
    default: return 0;
  }
}

std::optional<unsigned> VirtioMmio::write(std::uint64_t offset, std::uint64_t value)
{
  switch (offset) {
    case reg::kQueueNotify: return static_cast<unsigned>(value);
    case reg::kInterruptAck: int_status_ &= ~static_cast<std::uint32_t>(value); break;
    default: break;
  }
  return std::nullopt;
}

NetBackend::NetBackend(DeviceLayout layout, PacketSource source, std::size_t pending_cap, std::size_t batch)
  : layout_(std::move(layout)), source_(std::move(source)), pending_cap_(pending_cap), batch_(batch)
{
  if (layout_.kind != DeviceKind::Net || layout_.queues.size() != 2)
    throw ConfigError("net backend needs a net device layout with RX and TX queues");
  if (batch_ == 0)
    throw ConfigError("net backend batch must be positive");
}

void NetBackend::kick(unsigned queue)
{
  if (queue == kNetTx)
    tx_kicked_ = true;
}

bool NetBackend::rx_busy(std::uint64_t now) const
{
  auto next = source_.next_cycle();
  return !pending_.empty() || (next && *next <= now);
}

ServiceResult NetBackend::rx_poll(GpaAccess& mem, std::uint64_t now, const std::function<void()>& notify)
{
  ServiceResult r;
  for (const auto& p : source_.take_due(now)) {
    ++stats_.injected;
    r.progress = true;
    if (pending_.size() >= pending_cap_)
      ++stats_.dropped_overflow;
    else
      pending_.push_back(p);
  }
  if (pending_.empty())
    return r;

  const auto& q = layout_.queues[kNetRx];
  if (auto f = ring::probe_rings(mem, q)) {
    r.fault = f;
    return r;
  }
  // The RX thread polls; the guest never needs to kick this queue.
  if (!(ring::used_flags(mem, q) & ring::kUsedNoNotify))
    ring::set_used_flags(mem, q, ring::used_flags(mem, q) | ring::kUsedNoNotify);

  const std::uint16_t avail = ring::avail_idx(mem, q);
  std::uint16_t used = ring::used_idx(mem, q);
  while (!pending_.empty() && last_rx_avail_ != avail && r.completed < batch_) {
    const std::uint16_t id = ring::avail_entry(mem, q, last_rx_avail_) % q.size;
    const auto desc = ring::read_desc(mem, q, id);
    const auto payload = packet_payload(pending_.front());
    if (payload.size() > desc.len) {
      ++stats_.dropped_oversize;
      pending_.pop_front();
      r.progress = true;
      continue;
    }
    if (auto f = mem.probe(desc.addr, payload.size(), Access::Write)) {
      r.fault = f;
      break;
    }
    mem.write(desc.addr, payload);
    ring::set_used_entry(mem, q, used, {id, static_cast<std::uint32_t>(payload.size())});
    ++used;
    ++last_rx_avail_;
    ++r.completed;
    ++stats_.delivered;
    stats_.delivered_checksums.push_back(payload_checksum(payload));
    stats_.consumed.push_back(id);
    pending_.pop_front();
  }
  if (r.completed > 0) {
    ring::set_used_idx(mem, q, used);
    ++stats_.notifications;
    mmio_.raise();
    notify();
    r.progress = true;
  }
  return r;
}

ServiceResult NetBackend::tx_drain(GpaAccess& mem)
{
  ServiceResult r;
  if (!tx_kicked_)
    return r;
  const auto& q = layout_.queues[kNetTx];
  if (auto f = ring::probe_rings(mem, q)) {
    r.fault = f;
    return r;
  }
  const std::uint16_t avail = ring::avail_idx(mem, q);
  std::uint16_t used = ring::used_idx(mem, q);
  while (last_tx_avail_ != avail) {
    const std::uint16_t id = ring::avail_entry(mem, q, last_tx_avail_) % q.size;
    const auto desc = ring::read_desc(mem, q, id);
    if (auto f = mem.probe(desc.addr, desc.len, Access::Read)) {
      r.fault = f;
      break;
    }
    std::vector<std::uint8_t> bytes(desc.len);
    mem.read(desc.addr, bytes);
    stats_.tx_checksums.push_back(payload_checksum(bytes));
    ++stats_.tx_packets;
    ring::set_used_entry(mem, q, used, {id, desc.len});
    ++used;
    ++last_tx_avail_;
    ++r.completed;
  }
  if (r.completed > 0)
    ring::set_used_idx(mem, q, used);
  if (!r.fault)
    tx_kicked_ = false;
  r.progress = r.completed > 0 || !r.fault;
  return r;
}

BlkBackend::BlkBackend(DeviceLayout layout, std::vector<std::uint8_t> image)
  : layout_(std::move(layout)), image_(std::move(image))
{
  if (layout_.kind != DeviceKind::Blk || layout_.queues.size() != 1)
    throw ConfigError("blk backend needs a blk device layout with one queue");
  if (image_.size() % kSectorSize != 0)
    throw ConfigError("block image size must be a multiple of 512 bytes");
}

std::vector<std::uint8_t> BlkBackend::load_image(const std::filesystem::path& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ConfigError("cannot open block image " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void BlkBackend::save_image(const std::filesystem::path& path) const
{
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw std::runtime_error("cannot write block image " + path.string());
  out.write(reinterpret_cast<const char*>(image_.data()), static_cast<std::streamsize>(image_.size()));
}

void BlkBackend::kick(unsigned queue)
{
  if (queue == 0)
    kicked_ = true;
}

ServiceResult BlkBackend::process(GpaAccess& mem, const std::function<void()>& notify)
{
  ServiceResult r;
  if (!kicked_)
    return r;
  const auto& q = layout_.queues[0];
  if (auto f = ring::probe_rings(mem, q)) {
    r.fault = f;
    return r;
  }
  const std::uint16_t avail = ring::avail_idx(mem, q);
  std::uint16_t used = ring::used_idx(mem, q);
  while (last_avail_ != avail) {
    const std::uint16_t head = ring::avail_entry(mem, q, last_avail_) % q.size;
    const auto hdr_d = ring::read_desc(mem, q, head);
    const auto data_d = ring::read_desc(mem, q, hdr_d.next);
    const auto status_d = ring::read_desc(mem, q, data_d.next);
    std::optional<mmu::Fault> f = mem.probe(hdr_d.addr, 16, Access::Read);
    if (!f)
      f = mem.probe(status_d.addr, 1, Access::Write);
    if (f) {
      r.fault = f;
      break;
    }
    const auto type = static_cast<std::uint32_t>(mem.read_uint(hdr_d.addr, 4));
    const std::uint64_t sector = mem.read_uint(hdr_d.addr + 8, 8);
    const Access data_access = type == blk::kIn ? Access::Write : Access::Read;
    if (auto fd = mem.probe(data_d.addr, data_d.len, data_access)) {
      r.fault = fd;
      break;
    }

    std::uint8_t status = blk::kStatusOk;
    std::uint32_t written = 0;
    const std::uint64_t offset = sector * kSectorSize;
    const bool in_range = data_d.len % kSectorSize == 0 && offset <= image_.size() &&
                          data_d.len <= image_.size() - offset;
    if (type != blk::kIn && type != blk::kOut) {
      status = blk::kStatusUnsupported;
    } else if (!in_range) {
      status = blk::kStatusIoErr;
    } else if (type == blk::kIn) {
      mem.write(data_d.addr, std::span<const std::uint8_t>(image_.data() + offset, data_d.len));
      written = data_d.len;
    } else {
      mem.read(data_d.addr, std::span<std::uint8_t>(image_.data() + offset, data_d.len));
    }
    if (status != blk::kStatusOk)
      ++stats_.errors;
    mem.write_uint(status_d.addr, status, 1);
    ring::set_used_entry(mem, q, used, {head, written + 1});
    ++used;
    ++last_avail_;
    ++stats_.requests;
    ++r.completed;
  }
  if (r.completed > 0) {
    ring::set_used_idx(mem, q, used);
    ++stats_.notifications;
    mmio_.raise();
    notify();
  }
  if (!r.fault)
    kicked_ = false;
  r.progress = r.completed > 0 || !r.fault;
  return r;
}

std::uint64_t Console::read(std::uint64_t offset) const
{
  return offset == console_reg::kStatus ? 1 : 0;
}

void Console::write(std::uint64_t offset, std::uint64_t value)
{
  if (offset == console_reg::kData)
    output_.push_back(static_cast<char>(value & 0xff));
}

} // namespace duvisor::pvio
