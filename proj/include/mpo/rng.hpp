#pragma once

#include <cmath>
#include <cstdint>

namespace mpo {

/// Deterministic PRNG (xoshiro256** seeded via splitmix64).
/// Used everywhere instead of <random> distributions so that results are
/// reproducible independent of the standard library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& word : state_) word = splitmix64(x);
        has_gauss_ = false;
        gauss_spare_ = 0.0;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Requires n >= 1.
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

    /// Standard normal via Box-Muller with a cached spare.
    double gaussian() {
        if (has_gauss_) {
            has_gauss_ = false;
            return gauss_spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.14159265358979323846 * u2;
        gauss_spare_ = radius * std::sin(angle);
        has_gauss_ = true;
        return radius * std::cos(angle);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    /// Derives an independent stream for (seed, stream) pairs.
    static Rng fork(uint64_t seed, uint64_t stream) {
        uint64_t x = seed;
        const uint64_t a = splitmix64(x);
        x ^= stream * 0x9e3779b97f4a7c15ull;
        const uint64_t b = splitmix64(x);
        return Rng(a ^ rotl(b, 31));
    }

private:
    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    uint64_t state_[4];
    bool has_gauss_;
    double gauss_spare_;
};

}  // namespace mpo
