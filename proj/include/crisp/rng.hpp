#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace crisp {

// Deterministic, platform-independent random stream (SplitMix64 core).
// Every stochastic choice in the workbench draws from one of these, seeded
// through derive_seed so independent purposes get independent streams.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n). n must be > 0.
    std::size_t below(std::size_t n) {
        return static_cast<std::size_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller. Two uniforms per draw, no cached
    // second value, so the stream position is a pure function of call count.
    double gaussian() {
        double u1 = 0.0;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        double u2 = uniform01();
        constexpr double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

private:
    std::uint64_t state_;
};

// FNV-1a over a string tag.
inline std::uint64_t hash_tag(std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Derive an independent child seed from a base seed and a purpose tag.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    SeededRng mixer(base ^ hash_tag(tag));
    return mixer.next_u64();
}

// Numeric variant for per-index streams (per step, per video, ...).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    SeededRng mixer(base ^ (0x9e3779b97f4a7c15ull + index * 0xd1342543de82ef95ull));
    return mixer.next_u64();
}

}  // namespace crisp
