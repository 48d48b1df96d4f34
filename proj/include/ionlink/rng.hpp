#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace ionlink {

/// Seeded random source with platform-independent output.
///
/// std::mt19937_64 is fully specified by the standard, but the <random>
/// distributions are not, so the variates below are derived from the raw
/// 64-bit stream by hand. Identical seeds give identical streams on every
/// conforming implementation (up to libm rounding in std::log).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) {
        if (p <= 0.0) return false;
        if (p >= 1.0) return true;
        return uniform() < p;
    }

    // Exponential waiting time with the given rate; +inf for rate 0.
    double exponential(double rate) {
        if (rate <= 0.0) return INFINITY;
        return -std::log1p(-uniform()) / rate;
    }

private:
    std::mt19937_64 engine_;
};

// SplitMix64 finaliser.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Independent sub-stream seed for a named pipeline stage.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view stage) {
    return mix64(master ^ mix64(fnv1a64(stage)));
}

}  // namespace ionlink
