#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace infrank {

using Rng = std::mt19937_64;

// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Per-stage seed derived from a global seed and a stage name, so that adding
/// or reordering stages never shifts the random stream of another stage.
constexpr std::uint64_t derive_seed(std::uint64_t global, std::string_view stage) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char c : stage) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return mix64(global ^ mix64(h));
}

constexpr std::uint64_t derive_seed(std::uint64_t global, std::string_view stage, std::uint64_t index) {
    return mix64(derive_seed(global, stage) + index);
}

}  // namespace infrank
