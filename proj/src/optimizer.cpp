#include "malimg/optimizer.hpp"

#include <cmath>

namespace malimg {

AdamState adam_init(const ParamSet& params) {
    return {params.zeros_like(Role::moment), params.zeros_like(Role::moment), 0};
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, const AdamConfig& config) {
    require_same_structure(params, grads);
    ++state.t;
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
    const double step = config.learning_rate * std::sqrt(c2) / c1;
    const double eps = config.epsilon * std::sqrt(c2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].values;
        auto& m = state.first[i].values;
        auto& v = state.second[i].values;
        const auto& g = grads[i].values;
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = g[k];
            const double mk = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
            const double vk = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
            m[k] = static_cast<Real>(mk);
            v[k] = static_cast<Real>(vk);
            p[k] = static_cast<Real>(p[k] - step * mk / (std::sqrt(vk) + eps));
        }
    }
}

}  // namespace malimg
