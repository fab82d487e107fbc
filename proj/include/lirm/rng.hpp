#pragma once

#include <cmath>
#include <cstdint>

namespace lirm {

// PCG32: small serializable generator. Two words of state round-trip through
// checkpoints exactly, which std::mt19937's text serialization does not give us cheaply.
struct Rng {
    std::uint64_t state = 0x853c49e6748fea9bULL;
    std::uint64_t inc = 0xda3e39cb94b95bdbULL;

    Rng() = default;
    explicit Rng(std::uint64_t seed, std::uint64_t seq = 1) { reseed(seed, seq); }

    void reseed(std::uint64_t seed, std::uint64_t seq = 1) {
        state = 0;
        inc = (seq << 1u) | 1u;
        next_u32();
        state += seed;
        next_u32();
    }

    std::uint32_t next_u32() {
        std::uint64_t old = state;
        state = old * 6364136223846793005ULL + inc;
        std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    // uniform in [0, 1)
    double uniform() { return next_u32() * (1.0 / 4294967296.0); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int uniform_int(int lo, int hi) { // inclusive bounds
        return lo + static_cast<int>(next_u32() % static_cast<std::uint32_t>(hi - lo + 1));
    }

    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-12);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stateless per-element uniform; stratified ray jitter keys off (seed, ray, sample)
// so results do not depend on chunk partitioning.
inline double hash_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::uint64_t h = splitmix64(seed ^ splitmix64(a ^ splitmix64(b)));
    return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

} // namespace lirm
