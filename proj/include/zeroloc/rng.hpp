#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string_view>

namespace zeroloc {

// FNV-1a, 64-bit. Used to derive per-tensor streams from (seed, tensor name).
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// SplitMix64 finalizer; only used to turn a seed into a starting state.
inline std::uint64_t splitmix64_mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic xorshift64* stream. The exact constants below are part of the
// file-format contract for synthetic weights: any reimplementation that seeds
// with splitmix64_mix(seed), replaces a zero state with 0x9e3779b97f4a7c15,
// and then iterates x ^= x>>12; x ^= x<<25; x ^= x>>27; return x * M with
// M = 0x2545f4914f6cdd1d reproduces the same values bit for bit.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix64_mix(seed)) {
        if (state_ == 0) state_ = 0x9e3779b97f4a7c15ull;
    }

    static Rng for_name(std::uint64_t seed, std::string_view name) {
        return Rng(seed ^ fnv1a64(name));
    }

    std::uint64_t next_u64() {
        std::uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545f4914f6cdd1dull;
    }

    // [0, 1), 53 significant bits
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // (0, 1]; safe as a log() argument
    double next_open() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Box-Muller, consuming two draws per pair. Elements are filled in index
    // order so the stream position after the call is a function of n only.
    template <typename Real>
    void fill_gaussian(Real* out, std::size_t n, double mu, double sigma) {
        constexpr double two_pi = 6.283185307179586476925286766559;
        std::size_t i = 0;
        while (i < n) {
            const double u1 = next_open();
            const double u2 = next_unit();
            const double r = std::sqrt(-2.0 * std::log(u1));
            out[i++] = static_cast<Real>(mu + sigma * r * std::cos(two_pi * u2));
            if (i < n) {
                out[i++] = static_cast<Real>(mu + sigma * r * std::sin(two_pi * u2));
            }
        }
    }

private:
    std::uint64_t state_;
};

}  // namespace zeroloc
