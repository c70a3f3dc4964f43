#pragma once

#include <cmath>
#include <cstdint>

namespace ltuning {

// Deterministic counter-based PRNG (splitmix64). All randomness in the
// library flows through this type so that identical seeds give identical
// runs on any platform; std:: distributions are avoided on purpose since
// their output is implementation-defined.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Unbiased uniform integer in [0, n) via rejection.
    std::uint64_t next_below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x = next_u64();
        while (x >= limit) {
            x = next_u64();
        }
        return x % n;
    }

    // Standard normal via Box-Muller, caching the spare deviate.
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        constexpr double two_pi = 6.283185307179586476925286766559;
        const double angle = next_double() * two_pi;
        const double u = 1.0 - next_double();  // (0, 1], keeps log finite
        const double radius = std::sqrt(-2.0 * std::log(u));
        spare_ = std::sin(angle) * radius;
        has_spare_ = true;
        return std::cos(angle) * radius;
    }

    // Independent stream derived from this one's seed and a tag.
    SplitMix64 fork(std::uint64_t tag) const {
        SplitMix64 mixer(state_ ^ (tag * 0xD1B54A32D192ED03ULL));
        return SplitMix64(mixer.next_u64());
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace ltuning
