#include "duvisor/guest/canned.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <utility>

#include "duvisor/util/hash.hpp"

namespace duvisor::guest {

namespace {

constexpr std::array<std::pair<std::string_view, std::string_view>, 5> kCanned = {{
  {"hypercall", R"(# Null hypercall loop.
LOOP $REPS {
  HYPERCALL 0
}
HALT
)"},
  {"io_notify", R"(# Receive loop: every wake-up drains the RX ring and recycles buffers.
VIO_POST net, 0, 256
LOOP $REPS {
  WFI
  IRQ_ACK
  VIO_REAP net, 0
}
HALT
)"},
  {"mmio", R"(# Console status register reads.
LOOP $REPS {
  MMIO_LOAD.w r5, 0x10000004
}
HALT
)"},
  {"s2pf", R"(# One byte from each of $REPS fresh pages.
LI r6, 0x80200000
LOOP $REPS {
  LOAD.b r5, 0(r6)
  ADDI r6, r6, 4096
}
HALT
)"},
  {"vipi", R"(# Two-vCPU ping-pong over virtual IPIs.
ENTRY 0
LOOP $ROUNDS {
  SEND_VIPI 1
  WFI
  IRQ_ACK
}
HALT
ENTRY 1
LOOP $ROUNDS {
  WFI
  IRQ_ACK
  SEND_VIPI 0
}
HALT
)"},
}};

} // namespace

std::vector<std::string> canned_names()
{
  std::vector<std::string> out;
  for (const auto& [name, _] : kCanned)
    out.emplace_back(name);
  std::sort(out.begin(), out.end());
  return out;
}

std::optional<std::string_view> canned_source(std::string_view name)
{
  for (const auto& [n, src] : kCanned)
    if (n == name)
      return src;
  return std::nullopt;
}

std::uint64_t encode(const Instr& i)
{
  const std::uint64_t flags = (i.based ? 1u : 0u) | (i.has_arg ? 2u : 0u) | (i.write ? 4u : 0u);
  std::uint64_t operands = fnv1a_chain(fnv1a_chain(kFnvOffset, static_cast<std::uint64_t>(i.imm)), i.addr);
  operands = fnv1a_chain(operands, i.partner);
  return static_cast<std::uint64_t>(i.op) | std::uint64_t{i.rd} << 8 | std::uint64_t{i.rs} << 16 |
         std::uint64_t{i.width} << 24 | flags << 32 | (operands & 0xffffff) << 40;
}

std::vector<std::uint8_t> build_image(const Program& p)
{
  std::vector<std::uint8_t> img(p.image_bytes(), 0);
  for (std::size_t k = 0; k < p.code.size(); ++k) {
    const std::uint64_t w = encode(p.code[k]);
    for (unsigned b = 0; b < 8; ++b)
      img[k * kInstrBytes + b] = static_cast<std::uint8_t>(w >> (8 * b));
  }
  if (!p.data.empty())
    std::memcpy(img.data() + (p.data_base() - kCodeBase), p.data.data(), p.data.size());
  return img;
}

} // namespace duvisor::guest
