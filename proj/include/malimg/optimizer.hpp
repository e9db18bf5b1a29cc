#pragma once

#include <cstdint>

#include "malimg/tensor.hpp"

namespace malimg {

// Adaptive-moment gradient descent with bias correction.
struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    ParamSet first;
    ParamSet second;
    std::uint64_t t = 0;
};

AdamState adam_init(const ParamSet& params);
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, const AdamConfig& config);

}  // namespace malimg
