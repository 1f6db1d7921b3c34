#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace tad {

// Deterministic RNG with platform-independent sampling transforms.
// std::* distributions are implementation-defined, so every draw that must be
// bit-reproducible goes through this engine instead.
class Rng {
  public:
    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        // splitmix64 expansion of the seed into xoshiro256** state.
        uint64_t x = seed;
        for (auto& s : state_) {
            x += 0x9E3779B97f4A7C15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
            z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
            s = z ^ (z >> 31);
        }
        have_gauss_ = false;
    }

    uint64_t next_u64() {
        auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // uniform in [0, 1) with 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // log-uniform over [lo, hi], lo > 0
    double log_uniform(double lo, double hi) {
        return std::exp(uniform(std::log(lo), std::log(hi)));
    }

    double normal(double mean = 0.0, double sd = 1.0) {
        if (have_gauss_) {
            have_gauss_ = false;
            return mean + sd * gauss_spare_;
        }
        // Box-Muller; u in (0,1] so log is finite
        double u = 1.0 - uniform();
        double v = uniform();
        double r = std::sqrt(-2.0 * std::log(u));
        gauss_spare_ = r * std::sin(2.0 * M_PI * v);
        have_gauss_ = true;
        return mean + sd * r * std::cos(2.0 * M_PI * v);
    }

    // integer in [0, n), n >= 1, via rejection sampling (unbiased)
    uint64_t below(uint64_t n) {
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    int poisson(double lambda) {
        if (lambda <= 0.0) return 0;
        // Knuth product method; lambda stays small (< ~100) in this project
        double limit = std::exp(-lambda);
        int k = 0;
        double p = 1.0;
        do {
            ++k;
            p *= uniform();
        } while (p > limit);
        return k - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    uint64_t state_[4] = {};
    bool have_gauss_ = false;
    double gauss_spare_ = 0.0;
};

// FNV-1a, used both for stream checksums and derived-seed mixing.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xCBF29CE484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline uint64_t hash_combine(uint64_t seed, uint64_t v) {
    uint64_t buf[2] = {seed, v};
    return fnv1a64(buf, sizeof(buf));
}

inline uint64_t hash_combine(uint64_t seed, const std::string& s) {
    return fnv1a64(s.data(), s.size(), hash_combine(seed, s.size()));
}

}  // namespace tad
