#pragma once

#include <cmath>
#include <cstdint>

namespace qmlp {

// Deterministic 64-bit mixing PRNG (splitmix64). All stochastic draws in the
// library go through this generator so seeds are portable across platforms
// and standard-library versions.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double next_uniform(double lo, double hi) {
        return lo + (hi - lo) * next_uniform();
    }

    // Standard normal via Box-Muller on two uniforms.
    double next_normal() {
        double u1 = next_uniform();
        double u2 = next_uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Normal(0, stddev) truncated to [-2, 2] standard deviations, the usual
    // initializer for mixer-family weights.
    double next_trunc_normal(double stddev) {
        for (;;) {
            double z = next_normal();
            if (z >= -2.0 && z <= 2.0) return z * stddev;
        }
    }

    // +1 or -1 with equal probability.
    double next_rademacher() {
        return (next_u64() & 1u) ? 1.0 : -1.0;
    }

    // Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) {
        return next_u64() % n;
    }

private:
    std::uint64_t state_;
};

// Derive an independent stream from a parent seed and a stream index.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    SplitMix64 g(seed ^ (0x632be59bd9b4e019ULL * (stream + 1)));
    return g.next_u64();
}

} // namespace qmlp
