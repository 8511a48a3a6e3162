#include "vlp/hash.hpp"

#include <array>

namespace vlp {

namespace {

std::array<std::uint64_t, 256> make_table() {
    std::array<std::uint64_t, 256> table{};
    const std::uint64_t poly = 0xC96C5795D7870F42ULL;  // ECMA-182 reflected
    for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint64_t crc = i;
        for (int bit = 0; bit < 8; ++bit) {
            crc = (crc & 1) ? (crc >> 1) ^ poly : crc >> 1;
        }
        table[i] = crc;
    }
    return table;
}

}  // namespace

std::uint64_t crc64(const void* data, std::size_t len, std::uint64_t crc) {
    static const std::array<std::uint64_t, 256> table = make_table();
    const auto* p = static_cast<const std::uint8_t*>(data);
    crc = ~crc;
    for (std::size_t i = 0; i < len; ++i) {
        crc = table[(crc ^ p[i]) & 0xff] ^ (crc >> 8);
    }
    return ~crc;
}

}  // namespace vlp
