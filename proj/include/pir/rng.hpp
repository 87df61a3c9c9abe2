#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace pir {

// FNV-1a, 64-bit. Stable across platforms; used wherever a seed has to be
// derived from a string (record ids, participant ids, template text).
constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Counter-based generator: output n is mix(key, n). Copying the object
// snapshots the stream, and split() derives an independent stream, so the
// draws for one record never depend on how many draws another record made.
class CounterRng {
public:
    constexpr explicit CounterRng(std::uint64_t seed = 0) : key_(mix64(seed)) {}

    constexpr CounterRng split(std::uint64_t tag) const {
        CounterRng child;
        child.key_ = mix64(key_ ^ mix64(tag + 0x632be59bd9b4e019ULL));
        return child;
    }
    constexpr CounterRng split(std::string_view tag) const { return split(fnv1a64(tag)); }

    constexpr std::uint64_t next_u64() { return mix64(key_ ^ mix64(counter_++)); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi], inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    constexpr std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace pir
