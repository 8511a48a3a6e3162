#pragma once

#include <cstddef>
#include <cstdint>

namespace vlp {

/// CRC-64/XZ (ECMA-182 polynomial, reflected). Chainable via `crc`.
std::uint64_t crc64(const void* data, std::size_t len, std::uint64_t crc = 0);

}  // namespace vlp
