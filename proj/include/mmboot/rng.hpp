#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "mmboot/errors.hpp"

// Counter-based randomness.  Every draw is addressed by
// (master_seed, cell, chain, step, draw-within-step), so results are
// bit-identical no matter how work is scheduled across threads: a worker
// reconstructs any stream from its address instead of sharing generator
// state.  The core block cipher is Philox2x64-10.

namespace mmboot {

namespace detail {

inline constexpr std::uint64_t philox_m = 0xD2B74407B1CE6E93ULL;
inline constexpr std::uint64_t philox_w = 0x9E3779B97F4A7C15ULL;

/// One Philox2x64 round: multiply-hi/lo mix of the counter with the key.
inline void philox_round(std::uint64_t& c0, std::uint64_t& c1, std::uint64_t& key) {
    const unsigned __int128 product = static_cast<unsigned __int128>(philox_m) * c0;
    const std::uint64_t hi = static_cast<std::uint64_t>(product >> 64);
    const std::uint64_t lo = static_cast<std::uint64_t>(product);
    c0 = hi ^ key ^ c1;
    c1 = lo;
    key += philox_w;
}

/// Philox2x64-10: encrypt a 128-bit counter under a 64-bit key; the first
/// output word is the random value.
inline std::uint64_t philox2x64(std::uint64_t c0, std::uint64_t c1, std::uint64_t key) {
    for (int round = 0; round < 10; ++round)
        philox_round(c0, c1, key);
    return c0;
}

} // namespace detail

/// A reproducible random stream identified by (master_seed, cell, chain, step).
/// Draws within the stream are numbered sequentially; each draw is one
/// Philox evaluation of the packed address, so streams can be created
/// concurrently and in any order.
class RandomStream {
public:
    RandomStream(std::uint64_t master_seed, std::uint32_t cell,
                 std::uint64_t chain, unsigned step)
        : key_(master_seed),
          hi_(pack_hi(chain, step)),
          cell_(cell),
          draw_(0) {}

    /// Next raw 64-bit word.
    std::uint64_t next_u64() {
        const std::uint64_t lo = (static_cast<std::uint64_t>(cell_) << 32) |
                                 static_cast<std::uint64_t>(draw_++);
        return detail::philox2x64(hi_, lo, key_);
    }

    /// Uniform on [0, 1): 53 random bits.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform on (0, 1]: shifted so the logarithm below is always finite.
    double next_uniform_pos() {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    /// Standard normal draw, Box-Muller (cosine branch).  Consumes exactly
    /// two 64-bit words, keeping the draw count independent of the values.
    double next_normal() {
        const double u1 = next_uniform_pos();
        const double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Gamma(shape, scale) draw by the Marsaglia-Tsang squeeze method;
    /// shapes below one use the boosting identity
    /// Gamma(a) = Gamma(a+1) * U^(1/a).
    double next_gamma(double shape, double scale) {
        if (!(shape > 0.0) || !(scale > 0.0))
            throw config_error("next_gamma: shape and scale must be positive");
        if (shape < 1.0) {
            const double g = next_gamma(shape + 1.0, 1.0);
            const double u = next_uniform_pos();
            return g * std::pow(u, 1.0 / shape) * scale;
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / (3.0 * std::sqrt(d));
        for (;;) {
            double x, v;
            do {
                x = next_normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = next_uniform_pos();
            if (u < 1.0 - 0.0331 * x * x * x * x)
                return d * v * scale;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v)))
                return d * v * scale;
        }
    }

private:
    static std::uint64_t pack_hi(std::uint64_t chain, unsigned step) {
        if (chain >= (1ULL << 56))
            throw config_error("RandomStream: chain index exceeds 2^56");
        if (step >= 256)
            throw config_error("RandomStream: step index exceeds 255");
        return (static_cast<std::uint64_t>(step) << 56) | chain;
    }

    std::uint64_t key_;
    std::uint64_t hi_;
    std::uint32_t cell_;
    std::uint32_t draw_;
};

/// Derive an unrelated 64-bit seed from a master seed and an index
/// (splitmix64 finalizer); used to give independent simulations their own
/// seed namespaces without overlapping stream addresses.
inline std::uint64_t derive_seed(std::uint64_t master_seed, std::uint64_t index) {
    std::uint64_t z = master_seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace mmboot
