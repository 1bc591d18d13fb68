#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace vatt {

// splitmix64 step; used to fold tags/indices into derived seeds.
inline std::uint64_t mix_u64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic seed derivation: base seed -> (tag, index) stream seed.
// Keeps paired experiments paired: the same (base, tag, index) always
// yields the same child seed regardless of evaluation order.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
    std::uint64_t h = mix_u64(base);
    for (unsigned char c : tag) {
        h = mix_u64(h ^ c);
    }
    return mix_u64(h ^ index);
}

// mt19937_64 carrier with explicit, portable mappings to doubles.
// std::uniform_real_distribution is implementation-defined, so the
// mappings are spelled out here; the raw engine output is standardized.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo + 1);
        return lo + static_cast<std::int64_t>(eng_() % span);
    }

    // Standard normal via Box-Muller; pairs are cached so every draw is used.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = radius * std::sin(angle);
        have_spare_ = true;
        return radius * std::cos(angle);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    // Knuth's product method; rates here are small (per-slice blob counts).
    int poisson(double rate) {
        const double limit = std::exp(-rate);
        int count = 0;
        double product = uniform();
        while (product > limit) {
            ++count;
            product *= uniform();
        }
        return count;
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace vatt
