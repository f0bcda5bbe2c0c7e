// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace cmdskel {

// Deterministic PRNG with a fixed algorithm (splitmix64) so that results are
// reproducible across standard libraries and platforms. Streams for samples,
// epochs and views are derived functionally from a master seed, which keeps
// checkpoint-resume exact without serializing generator state.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // 32-bit bounded draw, bias negligible for the ranges used here.
    uint64_t below(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    uint64_t state_;
};

// Mixes a salt into a seed; used to derive independent streams, e.g.
// derive_seed(master, epoch, sample_index, view).
inline uint64_t derive_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed ^ (salt + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b) {
    return derive_seed(derive_seed(seed, a), b);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
    return derive_seed(derive_seed(seed, a, b), c);
}

}  // namespace cmdskel
