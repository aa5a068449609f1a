// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace magent::rng {

// splitmix64 finalizer. Stateless: every random draw in the project is a pure
// function of a derivation chain, so results never depend on evaluation order
// or thread scheduling.
inline uint64_t mix(uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline uint64_t derive(uint64_t key, uint64_t salt) { return mix(key ^ mix(salt)); }

template <typename... Rest>
inline uint64_t derive(uint64_t key, uint64_t salt, Rest... rest) {
    return derive(derive(key, salt), rest...);
}

// Uniform double in [0, 1) with 53 random bits.
inline double u01(uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

inline double uniform(uint64_t h, double lo, double hi) { return lo + (hi - lo) * u01(h); }

// A keyed counter stream: draw(i) is independent of all other indices.
class Stream {
public:
    explicit Stream(uint64_t key) : key_(key) {}

    uint64_t bits(uint64_t counter) const { return mix(key_ ^ (counter * 0xD1B54A32D192ED03ULL)); }
    double u01(uint64_t counter) const { return rng::u01(bits(counter)); }
    double uniform(uint64_t counter, double lo, double hi) const {
        return rng::uniform(bits(counter), lo, hi);
    }

private:
    uint64_t key_;
};

}  // namespace magent::rng
