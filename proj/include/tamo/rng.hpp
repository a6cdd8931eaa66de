#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace tamo {

// Counter-based generator: splitmix64 over (seed, counter). The stream depends
// only on the 64-bit seed, so identical seeds give identical streams on every
// platform. Distributions are implemented here rather than via <random> because
// the standard does not pin distribution algorithms across implementations.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : seed_(seed), counter_(0) {}

    uint64_t next_u64() {
        uint64_t z = seed_ + 0x9e3779b97f4a7c15ull * ++counter_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection-free scaling is fine at our scales.
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    // Box-Muller without caching so the stream position stays a pure function
    // of the number of draws.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586 * u2);
    }

    // Independent child stream, e.g. one per corpus sample.
    Rng derive(uint64_t salt) const {
        uint64_t z = seed_ ^ (0x9e3779b97f4a7c15ull + salt * 0xda942042e4dd58b5ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return Rng(z ^ (z >> 31));
    }

    Rng derive(const std::string& name) const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (unsigned char c : name) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        return derive(h);
    }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    uint64_t counter_;
};

}  // namespace tamo
