#pragma once

#include <cmath>
#include <cstdint>

namespace pionono {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derived stream seed for per-item generators (images, raters, MC draws).
inline uint64_t derive_seed(uint64_t seed, uint64_t item) {
    return splitmix64(seed ^ splitmix64(item + 1));
}

// xoshiro256** with explicit Box-Muller normals. Self-contained so that
// seeded runs are reproducible independent of the standard library's
// distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t s = seed;
        for (int i = 0; i < 4; ++i) {
            s = splitmix64(s);
            state_[i] = s;
        }
        have_cached_ = false;
    }

    uint64_t next_u64() {
        auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
        uint64_t result = rotl(state_[1] * 5, 7) * 9;
        uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0,1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    // Uniform integer in [lo, hi] inclusive.
    long long range(long long lo, long long hi) {
        return lo + static_cast<long long>(below(static_cast<uint64_t>(hi - lo + 1)));
    }

    bool coin(double p = 0.5) { return uniform() < p; }

    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    uint64_t state_[4];
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace pionono
