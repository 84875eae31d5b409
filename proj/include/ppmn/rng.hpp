#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ppmn {

// SplitMix64 in counter form: draw i (1-based) is mix(seed + i * 0x9E3779B97F4A7C15).
// Uniform reals take the top 53 bits; normals use one Box-Muller cosine
// branch per two draws. Integer draws are `next_u64() % n`. Every stream in
// the project (scene generation, weight init, shuffling) comes from here.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() {
        ++counter_;
        return mix(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    double normal() {
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

}  // namespace ppmn
