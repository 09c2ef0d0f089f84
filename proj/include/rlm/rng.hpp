#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "rlm/errors.hpp"

namespace rlm {

// Deterministic random source. All randomness in the library flows through
// this wrapper so that a fixed seed reproduces a run bit for bit; the raw
// mt19937_64 stream is standardized and the derived draws below avoid the
// implementation-defined std::*_distribution classes.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of resolution.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    bool bernoulli(double p_true) { return uniform() < p_true; }

    // Index below n, rejection-sampled to stay unbiased.
    std::size_t below(std::size_t n) {
        if (n == 0) throw ValueError("Rng::below: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return static_cast<std::size_t>(x % n);
    }

    // One draw from an unnormalized nonnegative weight vector.
    std::size_t categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (!(total > 0.0)) throw ValueError("Rng::categorical: zero total mass");
        double u = uniform() * total;
        double acc = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (u < acc) return i;
        }
        return weights.size() - 1;  // u landed on accumulated rounding
    }

    std::vector<double> uniform_vector(std::size_t n, double lo, double hi) {
        std::vector<double> out(n);
        for (auto& v : out) v = uniform(lo, hi);
        return out;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace rlm
