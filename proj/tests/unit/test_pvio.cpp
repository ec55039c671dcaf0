#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "duvisor/pvio/devices.hpp"
#include "duvisor/sim/kernel.hpp"

using namespace duvisor;
using namespace duvisor::pvio;

namespace {

constexpr std::uint64_t kRam = 0x8000'0000;
constexpr std::uint64_t kRamBytes = 16ull << 20;

/// Guest RAM mapped flat onto host memory; GPAs outside RAM fault.
struct FlatGuest
{
  mmu::PhysicalMemory mem{sim::kHostRamBase, 64ull << 20};
  GpaAccess gpa{mem, [](std::uint64_t g, mmu::Access, std::uint64_t) -> mmu::TranslateResult {
                  if (g < kRam || g >= kRam + kRamBytes)
                    return mmu::Fault{mmu::FaultKind::S2PageFault, g};
                  return mmu::Translation{sim::kHostRamBase + (g - kRam), g};
                }};
  std::vector<DeviceLayout> layouts = layout_devices({DeviceKind::Net, DeviceKind::Blk}, kRam + 0x10'0000).first;

  const QueueLayout& q(DeviceKind k, unsigned i) const
  {
    for (const auto& d : layouts)
      if (d.kind == k)
        return d.queues.at(i);
    throw std::logic_error("no device");
  }

  /// Driver side: publish descriptor `id` on queue `q`.
  void post(const QueueLayout& q, std::uint16_t id, std::uint32_t len, std::uint16_t flags)
  {
    ring::write_desc(gpa, q, id, {q.buffer(id), len, flags, 0});
    const auto idx = ring::avail_idx(gpa, q);
    ring::set_avail_entry(gpa, q, idx, id);
    ring::set_avail_idx(gpa, q, static_cast<std::uint16_t>(idx + 1));
  }
};

std::vector<PacketSpec> burst(std::size_t n, std::uint32_t len, std::uint64_t at = 100)
{
  std::vector<PacketSpec> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back({at, len, 1000 + i});
  return out;
}

} // namespace

TEST_CASE("RX delivery")
{
  FlatGuest g;
  const auto& rx = g.q(DeviceKind::Net, kNetRx);

  SUBCASE("one packet into one posted buffer raises one interrupt")
  {
    NetBackend net(g.layouts[0], PacketSource(burst(1, 300)));
    g.post(rx, 0, rx.buf_size, ring::kDescWrite);
    int notifies = 0;
    CHECK_FALSE(net.rx_poll(g.gpa, 50, [&] { ++notifies; }).progress);  // not yet arrived
    const auto r = net.rx_poll(g.gpa, 100, [&] { ++notifies; });
    CHECK(r.completed == 1);
    CHECK(notifies == 1);
    CHECK(ring::used_idx(g.gpa, rx) == 1);
    const auto used = ring::used_entry(g.gpa, rx, 0);
    CHECK(used.id == 0);
    CHECK(used.len == 300);
    std::vector<std::uint8_t> landed(300);
    g.gpa.read(rx.buffer(0), landed);
    CHECK(landed == packet_payload({100, 300, 1000}));
    CHECK(net.stats().delivered_checksums.front() == payload_checksum(landed));
  }
  SUBCASE("a batch of ten gives at most ten used entries and a single notify")
  {
    NetBackend net(g.layouts[0], PacketSource(burst(10, 64)));
    for (std::uint16_t i = 0; i < 16; ++i)
      g.post(rx, i, rx.buf_size, ring::kDescWrite);
    int notifies = 0;
    const auto r = net.rx_poll(g.gpa, 100, [&] { ++notifies; });
    CHECK(r.completed == 10);
    CHECK(notifies == 1);
    CHECK(ring::used_idx(g.gpa, rx) == 10);
    CHECK(net.stats().notifications == 1);
  }
  SUBCASE("a packet bigger than the buffer is dropped and counted")
  {
    NetBackend net(g.layouts[0], PacketSource(burst(1, 3000)));
    g.post(rx, 0, rx.buf_size, ring::kDescWrite);
    int notifies = 0;
    const auto r = net.rx_poll(g.gpa, 100, [&] { ++notifies; });
    CHECK(r.completed == 0);
    CHECK(notifies == 0);
    CHECK(net.stats().dropped_oversize == 1);
    CHECK(ring::used_idx(g.gpa, rx) == 0);
  }
  SUBCASE("no buffers: packets wait, none are lost")
  {
    NetBackend net(g.layouts[0], PacketSource(burst(3, 64)));
    CHECK(net.rx_poll(g.gpa, 100, [] {}).completed == 0);
    CHECK(net.pending() == 3);
    for (std::uint16_t i = 0; i < 3; ++i)
      g.post(rx, i, rx.buf_size, ring::kDescWrite);
    CHECK(net.rx_poll(g.gpa, 101, [] {}).completed == 3);
    CHECK(net.stats().consumed == std::vector<std::uint16_t>{0, 1, 2});
  }
  SUBCASE("rings outside guest RAM fault cleanly")
  {
    auto bad = g.layouts[0];
    bad.queues[kNetRx].used = kRam + kRamBytes;
    NetBackend net(bad, PacketSource(burst(1, 64)));
    const auto r = net.rx_poll(g.gpa, 100, [] {});
    REQUIRE(r.fault);
    CHECK(r.fault->kind == mmu::FaultKind::S2PageFault);
    CHECK(net.pending() == 1);
  }
}

TEST_CASE("TX drain")
{
  FlatGuest g;
  const auto& tx = g.q(DeviceKind::Net, kNetTx);
  NetBackend net(g.layouts[0], PacketSource{});

  SUBCASE("one buffer, one kick")
  {
    g.post(tx, 0, 128, 0);
    net.kick(kNetTx);
    CHECK(net.tx_drain(g.gpa).completed == 1);
    CHECK(ring::used_idx(g.gpa, tx) == 1);
  }
  SUBCASE("three buffers drained by a single kick")
  {
    for (std::uint16_t i = 0; i < 3; ++i)
      g.post(tx, i, 100 + i, 0);
    net.kick(kNetTx);
    CHECK(net.tx_drain(g.gpa).completed == 3);
    CHECK(net.stats().tx_packets == 3);
    CHECK_FALSE(net.tx_pending());
  }
  SUBCASE("a spurious kick changes nothing")
  {
    net.kick(kNetTx);
    const auto r = net.tx_drain(g.gpa);
    CHECK(r.completed == 0);
    CHECK(ring::used_idx(g.gpa, tx) == 0);
    CHECK(ring::avail_idx(g.gpa, tx) == 0);
  }
}

TEST_CASE("block requests")
{
  FlatGuest g;
  const auto& q = g.q(DeviceKind::Blk, 0);
  BlkBackend blk(g.layouts[1], std::vector<std::uint8_t>(8 * kSectorSize, 0));

  auto submit = [&](std::uint16_t head, std::uint32_t type, std::uint64_t sector, std::uint32_t len) {
    const std::uint64_t hdr = q.aux + 16ull * head;
    const std::uint64_t status = q.aux + 4096 + head;
    g.gpa.write_uint(hdr, type, 4);
    g.gpa.write_uint(hdr + 8, sector, 8);
    ring::write_desc(g.gpa, q, head, {hdr, 16, ring::kDescNext, static_cast<std::uint16_t>(head + 1)});
    ring::write_desc(g.gpa, q, head + 1,
                     {q.buffer(head), len, static_cast<std::uint16_t>(ring::kDescNext | (type == blk::kIn ? ring::kDescWrite : 0)),
                      static_cast<std::uint16_t>(head + 2)});
    ring::write_desc(g.gpa, q, head + 2, {status, 1, ring::kDescWrite, 0});
    const auto idx = ring::avail_idx(g.gpa, q);
    ring::set_avail_entry(g.gpa, q, idx, head);
    ring::set_avail_idx(g.gpa, q, static_cast<std::uint16_t>(idx + 1));
    return status;
  };

  std::vector<std::uint8_t> pattern(kSectorSize);
  for (std::size_t i = 0; i < pattern.size(); ++i)
    pattern[i] = static_cast<std::uint8_t>(i * 7);
  g.gpa.write(q.buffer(0), pattern);
  const auto st_w = submit(0, blk::kOut, 3, kSectorSize);
  const auto st_r = submit(3, blk::kIn, 3, kSectorSize);
  const auto st_bad = submit(6, blk::kIn, 8, kSectorSize);
  blk.kick(0);
  int notifies = 0;
  CHECK(blk.process(g.gpa, [&] { ++notifies; }).completed == 3);
  CHECK(notifies == 1);
  CHECK(g.gpa.read_uint(st_w, 1) == blk::kStatusOk);
  CHECK(g.gpa.read_uint(st_r, 1) == blk::kStatusOk);
  CHECK(g.gpa.read_uint(st_bad, 1) == blk::kStatusIoErr);
  std::vector<std::uint8_t> back(kSectorSize);
  g.gpa.read(q.buffer(3), back);
  CHECK(back == pattern);
  CHECK(std::equal(pattern.begin(), pattern.end(), blk.image().begin() + 3 * kSectorSize));
  CHECK(blk.stats().errors == 1);
}

TEST_CASE("register blocks")
{
  VirtioMmio m(1);
  CHECK(m.read(reg::kMagic) == reg::kMagicValue);
  CHECK(m.read(reg::kDeviceId) == 1);
  CHECK(m.write(reg::kQueueNotify, 1) == std::optional<unsigned>(1));
  CHECK_FALSE(m.write(reg::kInterruptAck, 1));
  m.raise();
  CHECK(m.read(reg::kInterruptStatus) == 1);

  Console c;
  CHECK(c.read(console_reg::kStatus) == 1);
  for (char ch : std::string("hi\n"))
    c.write(console_reg::kData, static_cast<unsigned char>(ch));
  CHECK(c.output() == "hi\n");
}

TEST_CASE("packet schedules")
{
  const auto a = PacketSource::generate(500, 1000, 2000, 64, 1500, 42);
  CHECK(a == PacketSource::generate(500, 1000, 2000, 64, 1500, 42));
  CHECK(a != PacketSource::generate(500, 1000, 2000, 64, 1500, 43));
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].length >= 64);
    CHECK(a[i].length <= 1500);
    if (i)
      CHECK(a[i].cycle >= a[i - 1].cycle);
  }
  CHECK(packet_payload(a[0]) == packet_payload(a[0]));

  const auto path = std::filesystem::temp_directory_path() / "duvisor_packets.txt";
  std::ofstream(path) << "# cycle length seed\n100 64 1\n\n250 1500 2 # trailing\n";
  const auto loaded = PacketSource::load(path);
  std::filesystem::remove(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[1] == PacketSpec{250, 1500, 2});

  PacketSource src(loaded);
  CHECK(src.next_cycle() == std::optional<std::uint64_t>(100));
  CHECK(src.take_due(99).empty());
  CHECK(src.take_due(300).size() == 2);
  CHECK(src.remaining() == 0);
}

TEST_CASE("device layout")
{
  const auto [layouts, bytes] = layout_devices({DeviceKind::Console, DeviceKind::Net}, kRam);
  CHECK(mmu::page_aligned(bytes));
  REQUIRE(layouts.size() == 2);
  CHECK(layouts[0].queues.empty());
  REQUIRE(layouts[1].queues.size() == 2);
  const auto& rx = layouts[1].queues[0];
  const auto& tx = layouts[1].queues[1];
  CHECK(rx.buffer(rx.size - 1) + rx.buf_size <= tx.desc);
  CHECK(tx.buffer(tx.size - 1) + tx.buf_size <= kRam + bytes);
  CHECK(device_from_string("net") == std::optional<DeviceKind>(DeviceKind::Net));
  CHECK_FALSE(device_from_string("gpu"));
}
