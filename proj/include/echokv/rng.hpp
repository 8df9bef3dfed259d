#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace echokv {

// Deterministic RNG. mt19937_64 output is pinned by the standard, and the
// uniform/gaussian transforms below are hand-rolled so the byte stream is
// identical across compilers and platforms (std::normal_distribution is not).
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Box-Muller; consumes two uniforms per sample, spare discarded
    double gaussian() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform(); // log(0) guard
        double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    float gaussian_f(float stddev) { return static_cast<float>(gaussian()) * stddev; }

    // uniform index in [0, n)
    size_t index(size_t n) { return static_cast<size_t>(next_u64() % n); }

  private:
    std::mt19937_64 gen_;
};

} // namespace echokv
