#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace confedmade {

// Deterministic RNG plumbing. Every stochastic decision in the simulator is
// drawn from a named sub-stream derived from the experiment seed, so runs are
// reproducible bit-for-bit regardless of scheduling. Distributions are
// hand-rolled on top of mt19937_64 because the std:: distribution objects are
// not guaranteed to produce the same sequences across standard libraries.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Folds a tag and a list of integers into a fresh 64-bit seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag,
                                 std::initializer_list<std::uint64_t> parts = {}) {
    std::uint64_t h = splitmix64(root ^ fnv1a64(tag));
    for (std::uint64_t p : parts) h = splitmix64(h ^ p);
    return h;
}

class RngStream {
public:
    RngStream() : engine_(0) {}
    explicit RngStream(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Unbiased integer in [lo, hi] via rejection sampling.
    std::uint64_t uniform_u64(std::uint64_t lo, std::uint64_t hi) {
        const std::uint64_t range = hi - lo + 1;  // hi >= lo; wraps to 0 on full span
        if (range == 0) return next_u64();
        const std::uint64_t limit = (std::uint64_t(-1) / range) * range;
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return lo + (v % range);
    }

    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(uniform_u64(0, static_cast<std::uint64_t>(hi - lo)));
    }

    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(uniform_u64(0, n - 1));
    }

    // [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    bool bernoulli(double p) { return uniform01() < p; }

    // Box-Muller; caches the second variate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Uniform permutation of {0, .., n-1}.
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        shuffle(p);
        return p;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace confedmade
