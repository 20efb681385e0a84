#pragma once

// Named, independent RNG streams derived from one master seed.
// Fixing the subsampling stream while varying attack configuration is a
// hard requirement for paired experiment comparisons, so every consumer
// asks for its own stream by (tag, index) instead of sharing a generator.

#include <cstdint>
#include <random>
#include <string_view>

namespace fedsim {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                 std::uint64_t index = 0) {
    std::uint64_t h = splitmix64(master ^ 0x5851f42d4c957f2dULL);
    for (char c : tag)
        h = splitmix64(h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
    return splitmix64(h ^ splitmix64(index));
}

inline std::mt19937_64 make_rng(std::uint64_t master, std::string_view tag,
                                std::uint64_t index = 0) {
    return std::mt19937_64(derive_seed(master, tag, index));
}

}  // namespace fedsim
