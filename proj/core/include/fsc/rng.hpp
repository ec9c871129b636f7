#pragma once

// Deterministic RNG with explicit transforms. std::normal_distribution and
// std::shuffle are implementation-defined, so everything that must replay
// bit-exactly (datasets, noise draws, episode sampling) goes through this.

#include <cmath>
#include <cstdint>
#include <vector>

#include "fsc/common.hpp"

namespace fsc {

// splitmix64: used for seeding and stream derivation.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// PCG32 (XSH-RR). One 64-bit state + fixed odd increment per stream.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0, uint64_t stream = 0) {
        state_ = 0;
        inc_ = (mix64(stream) << 1u) | 1u;
        next();
        state_ += mix64(seed);
        next();
    }

    // Independent child stream, e.g. rng.child(step, sample_idx).
    Rng child(uint64_t a, uint64_t b = 0, uint64_t c = 0) const {
        uint64_t s = mix64(state_ ^ mix64(a));
        uint64_t t = mix64(inc_ ^ mix64(b) ^ (mix64(c) << 1));
        return Rng(s, t);
    }

    uint32_t next() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ull + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
    }

    uint64_t next64() {
        uint64_t hi = next();
        return (hi << 32) | next();
    }

    // uniform in [0, 1) with 32 bits of mantissa input
    double uniform() { return next() * (1.0 / 4294967296.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint32_t below(uint32_t n) {
        FSC_CHECK(n > 0, "below(0)");
        // Lemire-style rejection to stay unbiased.
        uint64_t m = uint64_t(next()) * n;
        uint32_t l = uint32_t(m);
        if (l < n) {
            uint32_t t = (-n) % n;
            while (l < t) {
                m = uint64_t(next()) * n;
                l = uint32_t(m);
            }
        }
        return uint32_t(m >> 32);
    }

    int range(int lo, int hi) {  // inclusive ends
        return lo + int(below(uint32_t(hi - lo + 1)));
    }

    // Box-Muller, pairs cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-12) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Fisher-Yates; deterministic unlike std::shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = below(uint32_t(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices from [0, n), order randomized.
    std::vector<int> pick_distinct(int n, int k) {
        FSC_CHECK(k <= n, "pick_distinct: k > n");
        std::vector<int> idx(n);
        for (int i = 0; i < n; ++i) idx[i] = i;
        for (int i = 0; i < k; ++i) {
            int j = i + int(below(uint32_t(n - i)));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k);
        return idx;
    }

    bool bernoulli(double p) { return uniform() < p; }

  private:
    uint64_t state_ = 0;
    uint64_t inc_ = 1;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace fsc
