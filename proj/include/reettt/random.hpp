#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace reettt {

/// mt19937_64 with distribution code of our own so streams are identical
/// across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Integer in [lo, hi].
    std::uint64_t integer(std::uint64_t lo, std::uint64_t hi) {
        return lo + static_cast<std::uint64_t>(uniform() * static_cast<double>(hi - lo + 1)) % (hi - lo + 1);
    }
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }
    std::uint64_t next() { return engine_(); }

private:
    std::mt19937_64 engine_;
};

/// Decorrelates (base, index) pairs into independent stream seeds.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace reettt
