#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "tcrf/encoder.hpp"
#include "tcrf/errors.hpp"

namespace tcrf {

struct AdamConfig {
    double learning_rate = 0.005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::optional<double> grad_clip_norm;  // global L2 norm
};

struct AdamState {
    ParameterStore m;
    ParameterStore v;
    std::uint64_t step = 0;

    static AdamState for_params(const ParameterStore& params) { return {params.zeros_like(), params.zeros_like(), 0}; }
};

inline double global_norm(const ParameterStore& grads) {
    double sq = 0.0;
    for (const auto& t : grads.tensors()) sq += t.value.squaredNorm();
    return std::sqrt(sq);
}

// One bias-corrected Adam update. grads may be rescaled in place by
// clipping. Throws DivergenceError on a non-finite gradient, leaving params
// and state untouched.
inline void adam_step(ParameterStore& params, ParameterStore& grads, AdamState& state, const AdamConfig& config) {
    params.check_same_layout(grads);
    params.check_same_layout(state.m);
    params.check_same_layout(state.v);
    for (const auto& t : grads.tensors()) {
        if (!t.value.allFinite()) throw DivergenceError("non-finite gradient in '" + t.name + "'");
    }
    if (config.grad_clip_norm) {
        const double norm = global_norm(grads);
        if (norm > *config.grad_clip_norm) grads *= *config.grad_clip_norm / norm;
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Matrix& g = grads.at(i).value;
        Matrix& m = state.m.at_mut(i).value;
        Matrix& v = state.v.at_mut(i).value;
        m = config.beta1 * m + (1.0 - config.beta1) * g;
        v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
        params.at_mut(i).value.array() -=
            config.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + config.epsilon);
    }
}

}  // namespace tcrf
