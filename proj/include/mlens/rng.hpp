#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "mlens/common.hpp"

namespace mlens {

// mt19937_64 with hand-rolled distribution transforms. The engine output is
// pinned by the standard and the transforms below avoid the stdlib
// distributions, whose streams differ between implementations; every draw is
// therefore reproducible from the seed alone.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform in [0, n).
    std::size_t index(std::size_t n) {
        // Rejection keeps the draw unbiased for any n.
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return static_cast<std::size_t>(x % n);
    }

    // Box-Muller, pair cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal(0, std) with rejection outside two standard deviations.
    double truncated_normal(double stddev) {
        double z;
        do {
            z = normal();
        } while (z < -2.0 || z > 2.0);
        return z * stddev;
    }

    // Partial Fisher-Yates: the first m slots of a fresh identity permutation.
    std::vector<std::size_t> sample_indices(std::size_t n, std::size_t m) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        for (std::size_t i = 0; i < m && i + 1 < n; ++i) {
            std::size_t j = i + index(n - i);
            std::swap(idx[i], idx[j]);
        }
        idx.resize(m);
        return idx;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace mlens
