#include "duvisor/pvio/virtqueue.hpp"

#include <stdexcept>

namespace duvisor::pvio {

using mmu::Access;
using mmu::kPageSize;

std::string_view to_string(DeviceKind k)
{
  switch (k) {
    case DeviceKind::Console: return "console";
    case DeviceKind::Net: return "net";
    case DeviceKind::Blk: return "blk";
  }
  return "?";
}

std::optional<DeviceKind> device_from_string(std::string_view s)
{
  if (s == "console")
    return DeviceKind::Console;
  if (s == "net" || s == "virtio-net")
    return DeviceKind::Net;
  if (s == "blk" || s == "virtio-blk")
    return DeviceKind::Blk;
  return std::nullopt;
}

namespace {

std::uint64_t page_up(std::uint64_t v)
{
  return (v + kPageSize - 1) & ~(kPageSize - 1);
}

QueueLayout place_queue(std::uint64_t& cursor, std::uint32_t buf_size, bool with_aux)
{
  QueueLayout q;
  q.buf_size = buf_size;
  q.desc = cursor;
  cursor += page_up(ring::desc_bytes(q));
  q.avail = cursor;
  cursor += page_up(ring::avail_bytes(q));
  q.used = cursor;
  cursor += page_up(ring::used_bytes(q));
  if (with_aux) {
    q.aux = cursor;
    cursor += 2 * kPageSize;
  }
  q.buffers = cursor;
  cursor += page_up(std::uint64_t{q.size} * buf_size);
  return q;
}

} // namespace

std::pair<std::vector<DeviceLayout>, std::uint64_t> layout_devices(const std::vector<DeviceKind>& devices,
                                                                   std::uint64_t base)
{
  std::vector<DeviceLayout> out;
  std::uint64_t cursor = base;
  for (DeviceKind k : devices) {
    DeviceLayout d;
    d.kind = k;
    switch (k) {
      case DeviceKind::Console:
        d.mmio_base = kConsoleBase;
        break;
      case DeviceKind::Net:
        d.mmio_base = kNetBase;
        d.irq = kNetIrq;
        d.queues.push_back(place_queue(cursor, 2048, false));
        d.queues.push_back(place_queue(cursor, 2048, false));
        break;
      case DeviceKind::Blk:
        d.mmio_base = kBlkBase;
        d.irq = kBlkIrq;
        d.queues.push_back(place_queue(cursor, 4096, true));
        break;
    }
    out.push_back(std::move(d));
  }
  return {std::move(out), cursor - base};
}

std::optional<mmu::Fault> GpaAccess::probe(std::uint64_t gpa, std::uint64_t len, Access access) const
{
  while (len > 0) {
    const std::uint64_t chunk = std::min(len, kPageSize - (gpa & (kPageSize - 1)));
    auto r = translate_(gpa, access, chunk);
    if (auto* f = std::get_if<mmu::Fault>(&r))
      return *f;
    gpa += chunk;
    len -= chunk;
  }
  return std::nullopt;
}

std::uint64_t GpaAccess::hpa(std::uint64_t gpa, Access access, std::uint64_t len) const
{
  auto r = translate_(gpa, access, len);
  if (auto* t = std::get_if<mmu::Translation>(&r))
    return t->hpa;
  throw std::logic_error("guest-physical access without a successful probe");
}

void GpaAccess::read(std::uint64_t gpa, std::span<std::uint8_t> out) const
{
  std::size_t done = 0;
  while (done < out.size()) {
    const std::uint64_t at = gpa + done;
    const std::uint64_t chunk = std::min<std::uint64_t>(out.size() - done, kPageSize - (at & (kPageSize - 1)));
    mem_.read(hpa(at, Access::Read, chunk), out.subspan(done, chunk), mmu::Origin::Guest);
    done += chunk;
  }
}

void GpaAccess::write(std::uint64_t gpa, std::span<const std::uint8_t> in)
{
  std::size_t done = 0;
  while (done < in.size()) {
    const std::uint64_t at = gpa + done;
    const std::uint64_t chunk = std::min<std::uint64_t>(in.size() - done, kPageSize - (at & (kPageSize - 1)));
    mem_.write(hpa(at, Access::Write, chunk), in.subspan(done, chunk), mmu::Origin::Guest);
    done += chunk;
  }
}

std::uint64_t GpaAccess::read_uint(std::uint64_t gpa, unsigned len) const
{
  std::uint8_t buf[8] = {};
  read(gpa, std::span(buf, len));
  std::uint64_t v = 0;
  for (unsigned i = 0; i < len; ++i)
    v |= std::uint64_t{buf[i]} << (8 * i);
  return v;
}

void GpaAccess::write_uint(std::uint64_t gpa, std::uint64_t value, unsigned len)
{
  std::uint8_t buf[8];
  for (unsigned i = 0; i < len; ++i)
    buf[i] = static_cast<std::uint8_t>(value >> (8 * i));
  write(gpa, std::span<const std::uint8_t>(buf, len));
}

namespace ring {

std::uint64_t desc_bytes(const QueueLayout& q)
{
  return 16ull * q.size;
}

std::uint64_t avail_bytes(const QueueLayout& q)
{
  return 4 + 2ull * q.size + 2;
}

std::uint64_t used_bytes(const QueueLayout& q)
{
  return 4 + 8ull * q.size + 2;
}

std::optional<mmu::Fault> probe_rings(const GpaAccess& m, const QueueLayout& q)
{
  for (auto [base, len] : {std::pair{q.desc, desc_bytes(q)}, std::pair{q.avail, avail_bytes(q)},
                           std::pair{q.used, used_bytes(q)}}) {
    if (auto f = m.probe(base, len, Access::Read))
      return f;
    if (auto f = m.probe(base, len, Access::Write))
      return f;
  }
  return std::nullopt;
}

Desc read_desc(const GpaAccess& m, const QueueLayout& q, std::uint16_t i)
{
  const std::uint64_t at = q.desc + 16ull * (i % q.size);
  Desc d;
  d.addr = m.read_uint(at, 8);
  d.len = static_cast<std::uint32_t>(m.read_uint(at + 8, 4));
  d.flags = static_cast<std::uint16_t>(m.read_uint(at + 12, 2));
  d.next = static_cast<std::uint16_t>(m.read_uint(at + 14, 2));
  return d;
}

void write_desc(GpaAccess& m, const QueueLayout& q, std::uint16_t i, const Desc& d)
{
  const std::uint64_t at = q.desc + 16ull * (i % q.size);
  m.write_uint(at, d.addr, 8);
  m.write_uint(at + 8, d.len, 4);
  m.write_uint(at + 12, d.flags, 2);
  m.write_uint(at + 14, d.next, 2);
}

std::uint16_t avail_idx(const GpaAccess& m, const QueueLayout& q)
{
  return static_cast<std::uint16_t>(m.read_uint(q.avail + 2, 2));
}

void set_avail_idx(GpaAccess& m, const QueueLayout& q, std::uint16_t idx)
{
  m.write_uint(q.avail + 2, idx, 2);
}

std::uint16_t avail_entry(const GpaAccess& m, const QueueLayout& q, std::uint16_t slot)
{
  return static_cast<std::uint16_t>(m.read_uint(q.avail + 4 + 2ull * (slot % q.size), 2));
}

void set_avail_entry(GpaAccess& m, const QueueLayout& q, std::uint16_t slot, std::uint16_t desc)
{
  m.write_uint(q.avail + 4 + 2ull * (slot % q.size), desc, 2);
}

std::uint16_t used_flags(const GpaAccess& m, const QueueLayout& q)
{
  return static_cast<std::uint16_t>(m.read_uint(q.used, 2));
}

void set_used_flags(GpaAccess& m, const QueueLayout& q, std::uint16_t flags)
{
  m.write_uint(q.used, flags, 2);
}

std::uint16_t used_idx(const GpaAccess& m, const QueueLayout& q)
{
  return static_cast<std::uint16_t>(m.read_uint(q.used + 2, 2));
}

void set_used_idx(GpaAccess& m, const QueueLayout& q, std::uint16_t idx)
{
  m.write_uint(q.used + 2, idx, 2);
}

UsedElem used_entry(const GpaAccess& m, const QueueLayout& q, std::uint16_t slot)
{
  const std::uint64_t at = q.used + 4 + 8ull * (slot % q.size);
  return UsedElem{static_cast<std::uint32_t>(m.read_uint(at, 4)),
                  static_cast<std::uint32_t>(m.read_uint(at + 4, 4))};
}

void set_used_entry(GpaAccess& m, const QueueLayout& q, std::uint16_t slot, UsedElem e)
{
  const std::uint64_t at = q.used + 4 + 8ull * (slot % q.size);
  m.write_uint(at, e.id, 4);
  m.write_uint(at + 4, e.len, 4);
}

} // namespace ring

} // namespace duvisor::pvio
