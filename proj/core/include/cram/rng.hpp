#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cram {

// Deterministic random source. mt19937_64 has a standardized bit stream, and
// every distribution below is implemented by hand on top of it, so a given
// seed produces the same draws on every platform and standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

    std::uint64_t raw() { return engine_(); }

    // Uniform on [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform on (eps, 1 - eps]; keeps log() calls finite.
    double uniform_open(double eps = 1e-12) {
        double u = uniform();
        if (u < eps) u = eps;
        if (u > 1.0 - eps) u = 1.0 - eps;
        return u;
    }

    std::uint64_t uniform_index(std::uint64_t n) {
        // Rejection sampling; unbiased for any n > 0.
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do { x = engine_(); } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        // Box-Muller; one draw per call keeps the stream layout simple.
        double u1 = uniform_open();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double gumbel() {
        double u = uniform_open();
        return -std::log(-std::log(u));
    }

    // Pareto via inverse CDF, scaled so the minimum is `xmin`, clipped to
    // [xmin, clip_hi].
    double pareto(double shape, double xmin, double clip_hi) {
        double u = uniform_open();
        double x = xmin * std::pow(u, -1.0 / shape);
        if (x > clip_hi) x = clip_hi;
        return x;
    }

    // Derive an independent stream from the construction seed and a key.
    // splitmix64 scrambles the pair so nearby keys are uncorrelated.
    Rng child(std::uint64_t key) const {
        std::uint64_t z = seed_ + key * 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        z = z ^ (z >> 31);
        return Rng(z);
    }

private:
    std::mt19937_64 engine_;
    std::uint64_t seed_;
};

}  // namespace cram
