#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace hybridsel {

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

// Derives an independent seed for a named stream (e.g. "calibration", "eval").
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

}  // namespace hybridsel
