#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace codonball {

// Thrown on bad user input: malformed files, mismatched shapes, invalid
// config values. Maps to CLI exit code 1.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when an operation fails at runtime on otherwise valid input
// (non-finite loss, I/O failure mid-run). Maps to CLI exit code 2.
struct RuntimeFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Stable 64-bit FNV-1a. Used to derive per-component seeds from one run
// seed, so that adding a consumer never shifts another consumer's stream.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view component) {
    std::uint64_t h = fnv1a(component);
    h ^= base + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    // splitmix64 finalizer
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ULL;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebULL;
    h ^= h >> 31;
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view component, std::uint64_t index) {
    return derive_seed(base ^ (0x9e3779b97f4a7c15ULL * (index + 1)), component);
}

} // namespace codonball
