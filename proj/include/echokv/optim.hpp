#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "echokv/error.hpp"

namespace echokv {

// Cosine decay without warmup: base · ½(1 + cos(π·step/total)). step counts
// completed steps, so step 0 yields the base rate and step ≥ total yields 0.
inline double cosine_lr(double base_lr, size_t step, size_t total_steps) {
    if (total_steps == 0) return base_lr;
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * frac));
}

struct AdamWConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// One decoupled-weight-decay Adam update. m and v hold the first/second
// moment estimates in double; t is the 1-based step count used for bias
// correction. lr is passed per call so a schedule can drive it.
inline void adamw_step(float* param, const float* grad, double* m, double* v, size_t n,
                       size_t t, double lr, const AdamWConfig& cfg = {}) {
    if (t == 0) throw NumericError("adamw_step: step count must be 1-based");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (size_t i = 0; i < n; ++i) {
        const double g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double p = param[i];
        p -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p);
        param[i] = static_cast<float>(p);
    }
}

// optimizer state for one flat parameter vector
class AdamW {
public:
    AdamW(size_t n, AdamWConfig cfg = {}) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

    // applies one update with the given learning rate (e.g. from cosine_lr)
    void step(float* param, const float* grad, size_t n, double lr) {
        if (n != m_.size()) throw DimensionError("AdamW::step: parameter count changed");
        ++t_;
        adamw_step(param, grad, m_.data(), v_.data(), n, t_, lr, cfg_);
    }

    size_t steps_taken() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    std::vector<double> m_, v_;
    size_t t_ = 0;
};

} // namespace echokv
