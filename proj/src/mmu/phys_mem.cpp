#include "duvisor/mmu/phys_mem.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

#include "duvisor/hw/types.hpp"

namespace duvisor::mmu {

PhysicalMemory::PhysicalMemory(std::uint64_t base, std::uint64_t size)
  : base_(base), size_(size)
{
  if (!page_aligned(base) || !page_aligned(size) || size == 0)
    throw ConfigError("host RAM extent must be page aligned and non-empty");
}

bool PhysicalMemory::contains(std::uint64_t hpa, std::uint64_t len) const
{
  return hpa >= base_ && len <= size_ && hpa - base_ <= size_ - len;
}

void PhysicalMemory::check(std::uint64_t hpa, std::uint64_t len) const
{
  if (!contains(hpa, len)) {
    std::ostringstream os;
    os << "physical access outside host RAM: 0x" << std::hex << hpa << "+" << std::dec << len;
    throw std::out_of_range(os.str());
  }
}

void PhysicalMemory::notify(std::uint64_t hpa, std::uint64_t len, bool write, Origin origin) const
{
  if (observer_)
    observer_(MemAccess{hpa, len, write, origin});
}

void PhysicalMemory::read(std::uint64_t hpa, std::span<std::uint8_t> out, Origin origin) const
{
  check(hpa, out.size());
  notify(hpa, out.size(), false, origin);
  std::size_t done = 0;
  while (done < out.size()) {
    const std::uint64_t addr = hpa + done;
    const std::uint64_t page = addr >> kPageShift;
    const std::uint64_t off = addr & (kPageSize - 1);
    const std::size_t chunk = std::min<std::size_t>(out.size() - done, kPageSize - off);
    auto it = pages_.find(page);
    if (it == pages_.end())
      std::fill_n(out.data() + done, chunk, 0);
    else
      std::memcpy(out.data() + done, it->second->data() + off, chunk);
    done += chunk;
  }
}

void PhysicalMemory::write(std::uint64_t hpa, std::span<const std::uint8_t> in, Origin origin)
{
  check(hpa, in.size());
  notify(hpa, in.size(), true, origin);
  std::size_t done = 0;
  while (done < in.size()) {
    const std::uint64_t addr = hpa + done;
    const std::uint64_t page = addr >> kPageShift;
    const std::uint64_t off = addr & (kPageSize - 1);
    const std::size_t chunk = std::min<std::size_t>(in.size() - done, kPageSize - off);
    auto& slot = pages_[page];
    if (!slot)
      slot = std::make_unique<Page>(Page{});
    std::memcpy(slot->data() + off, in.data() + done, chunk);
    done += chunk;
  }
}

std::uint64_t PhysicalMemory::read_u64(std::uint64_t hpa, Origin origin) const
{
  return read_uint(hpa, 8, origin);
}

void PhysicalMemory::write_u64(std::uint64_t hpa, std::uint64_t value, Origin origin)
{
  write_uint(hpa, value, 8, origin);
}

std::uint64_t PhysicalMemory::read_uint(std::uint64_t hpa, unsigned len, Origin origin) const
{
  std::array<std::uint8_t, 8> buf{};
  read(hpa, std::span(buf.data(), len), origin);
  std::uint64_t v = 0;
  for (unsigned i = 0; i < len; ++i)
    v |= std::uint64_t{buf[i]} << (8 * i);
  return v;
}

void PhysicalMemory::write_uint(std::uint64_t hpa, std::uint64_t value, unsigned len, Origin origin)
{
  std::array<std::uint8_t, 8> buf{};
  for (unsigned i = 0; i < len; ++i)
    buf[i] = static_cast<std::uint8_t>(value >> (8 * i));
  write(hpa, std::span<const std::uint8_t>(buf.data(), len), origin);
}

void PhysicalMemory::zero_page(std::uint64_t hpa)
{
  check(hpa & ~(kPageSize - 1), kPageSize);
  pages_.erase(hpa >> kPageShift);
}

void PhysicalMemory::zero_range(std::uint64_t hpa, std::uint64_t len)
{
  check(hpa, len);
  const std::uint64_t first = hpa >> kPageShift;
  const std::uint64_t last = (hpa + len + kPageSize - 1) >> kPageShift;
  if (last - first < pages_.size()) {
    for (std::uint64_t p = first; p < last; ++p)
      pages_.erase(p);
    return;
  }
  std::erase_if(pages_, [&](const auto& kv) { return kv.first >= first && kv.first < last; });
}

} // namespace duvisor::mmu
