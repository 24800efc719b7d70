#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lat/tensor.hpp"

namespace lat {

// Deterministic splitmix64 stream. std:: distributions are implementation
// defined, so all sampling goes through this.
class Rng {
   public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // [0, n)
    int64_t uniform_int(int64_t n) { return static_cast<int64_t>(uniform() * static_cast<double>(n)); }

    float uniform_range(float lo, float hi) { return lo + static_cast<float>(uniform()) * (hi - lo); }

    float normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586 * u2;
        spare_ = static_cast<float>(r * std::sin(a));
        have_spare_ = true;
        return static_cast<float>(r * std::cos(a));
    }

    Tensor normal_tensor(std::vector<int64_t> shape, float stdev) {
        Tensor t = Tensor::zeros(std::move(shape));
        for (float& x : t.f) x = normal() * stdev;
        return t;
    }

    Tensor uniform_tensor(std::vector<int64_t> shape, float lo, float hi) {
        Tensor t = Tensor::zeros(std::move(shape));
        for (float& x : t.f) x = uniform_range(lo, hi);
        return t;
    }

   private:
    uint64_t state_;
    float spare_ = 0.0f;
    bool have_spare_ = false;
};

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

// Independent stream for a named purpose within a seeded run.
inline Rng rng_stream(uint64_t seed, const std::string& purpose, uint64_t index = 0) {
    uint64_t h = fnv1a64(purpose);
    h = fnv1a64(&seed, sizeof(seed), h);
    h = fnv1a64(&index, sizeof(index), h);
    return Rng(h);
}

}  // namespace lat
