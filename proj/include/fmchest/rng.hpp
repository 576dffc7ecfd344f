#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "fmchest/error.hpp"

namespace fmchest {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl64(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

}  // namespace detail

/// Seeded pseudo-random stream: xoshiro256++ core, Box-Muller normals.
///
/// The full generator state is the four xoshiro words plus a one-value
/// normal cache, so identical (seed, call sequence) reproduces identical
/// draws on any platform. Single-owner: parallel code derives independent
/// streams with child() instead of sharing one Rng.
class Rng {
public:
    static constexpr const char* kAlgorithmId = "xoshiro256++/box-muller";

    explicit Rng(std::uint64_t seed) : seed_(seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = detail::splitmix64(sm);
    }

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl64(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl64(state_[3], 45);
        return result;
    }

    /// Uniform on [0, 1), 53 random mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform on [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal draw. Box-Muller produces pairs; the second value is
    /// cached, so draw parity is part of the stream state.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    /// Independent stream derived from this Rng's root seed and a stream
    /// index. Depends only on (seed, stream), never on draw position.
    Rng child(std::uint64_t stream) const {
        std::uint64_t x = seed_ ^ (0xA0761D6478BD642FULL * (stream + 1));
        return Rng(detail::splitmix64(x));
    }

private:
    std::uint64_t seed_;
    std::array<std::uint64_t, 4> state_{};
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace fmchest
