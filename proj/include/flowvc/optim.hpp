#pragma once

#include <cstdint>
#include <vector>

namespace flowvc {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 5.0;  // global-norm gradient clip; <= 0 disables
};

struct AdamState {
    size_t step = 0;
    std::vector<double> m;
    std::vector<double> v;

    void init(size_t n) {
        step = 0;
        m.assign(n, 0.0);
        v.assign(n, 0.0);
    }
};

// Rescales grads in place so the global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(std::vector<double>& grads, double max_norm);

// Bias-corrected adaptive-moment update with global-norm clipping applied
// first.  Entries where frozen_mask is nonzero are left untouched.
void adam_step(AdamState& state, std::vector<double>& params, std::vector<double> grads,
               const AdamConfig& cfg, const std::vector<uint8_t>* frozen_mask = nullptr);

}  // namespace flowvc
