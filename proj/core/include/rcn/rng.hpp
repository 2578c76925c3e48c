#pragma once

#include <cmath>
#include <cstdint>

namespace rcn {

// Deterministic PRNG (xoshiro256** seeded through splitmix64) with hand-rolled
// distributions. std:: distributions are implementation-defined, so sampling is
// done explicitly to keep streams reproducible across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {
        uint64_t x = seed + 0x9e3779b97f4a7c15ull;
        for (auto& s : state_) {
            s = splitmix64(x);
        }
    }

    // Independent substream; identical (seed, stream) pairs give identical streams.
    Rng derive(uint64_t stream) const {
        uint64_t x = seed_ + 0x9e3779b97f4a7c15ull;
        uint64_t a = splitmix64(x);
        x = a ^ (stream * 0xbf58476d1ce4e5b9ull + 0x94d049bb133111ebull);
        return Rng(splitmix64(x));
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

    // Uniform in [0,1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n); n must be > 0.
    uint64_t uniform_int(uint64_t n) {
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Marsaglia polar; one spare cached per pair.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        has_spare_ = true;
        return u * m;
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    uint64_t seed() const { return seed_; }

private:
    explicit Rng(uint64_t raw, int) = delete;

    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t seed_;
    uint64_t state_[4] = {};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace rcn
