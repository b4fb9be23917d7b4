// Seeded PCG32 generator so data generation and parameter init are
// reproducible across platforms and standard-library versions.
#pragma once

#include <cmath>
#include <cstdint>

namespace simt {

class Pcg32 {
public:
    explicit Pcg32(uint64_t seed = 0x853c49e6748fea9bULL, uint64_t stream = 0xda3e39cb94b95bdbULL) {
        state_ = 0U;
        inc_ = (stream << 1u) | 1u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    uint32_t next_u32() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    // Uniform in [0, 1).
    double next_double() {
        uint64_t hi = next_u32();
        uint64_t lo = next_u32();
        return static_cast<double>(((hi << 21) ^ lo) & ((1ULL << 53) - 1)) / 9007199254740992.0;
    }

    // Uniform integer in [0, n).
    uint32_t next_below(uint32_t n) {
        // unbiased rejection sampling
        uint32_t threshold = (0u - n) % n;
        for (;;) {
            uint32_t r = next_u32();
            if (r >= threshold) return r % n;
        }
    }

    // Box-Muller; one cached spare.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = next_double();
        } while (u1 <= 1e-300);
        double u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename Vec>
    void shuffle(Vec& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = next_below(static_cast<uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_ = 0;
    uint64_t inc_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace simt
