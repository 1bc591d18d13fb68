#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>

namespace vatt::detail {

// All on-disk numeric payloads are little-endian; these are no-ops on LE
// hosts and byte-swap in place on BE hosts (symmetric for read and write).
template <typename T>
inline void swap_le_inplace(T* data, std::size_t n) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < n; ++i) {
            if constexpr (sizeof(T) == 8) {
                std::uint64_t bits;
                std::memcpy(&bits, data + i, 8);
                bits = __builtin_bswap64(bits);
                std::memcpy(data + i, &bits, 8);
            } else {
                std::uint32_t bits;
                std::memcpy(&bits, data + i, 4);
                bits = __builtin_bswap32(bits);
                std::memcpy(data + i, &bits, 4);
            }
        }
    } else {
        (void)data;
        (void)n;
    }
}

}  // namespace vatt::detail
