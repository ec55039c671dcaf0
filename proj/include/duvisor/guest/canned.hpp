#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "duvisor/guest/isa.hpp"

namespace duvisor::guest {

/// Names of the built-in guests, sorted.
std::vector<std::string> canned_names();

/// Source text of a built-in guest. It may reference `$REPS` and `$ROUNDS`.
std::optional<std::string_view> canned_source(std::string_view name);

/// Bytes loaded at kCodeBase: one 8-byte word per instruction, then the data
/// blob at data_base(). The executor decodes from the Program itself; the
/// words only give the code pages real content to fetch and check.
std::vector<std::uint8_t> build_image(const Program& p);

std::uint64_t encode(const Instr& i);

} // namespace duvisor::guest
