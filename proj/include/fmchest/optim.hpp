#pragma once

#include <cmath>
#include <vector>

#include "fmchest/error.hpp"
#include "fmchest/nn.hpp"

namespace fmchest {

struct AdamWConfig {
    double lr = 1e-4;  // desk-scale default; set 1e-5 to match large-scale presets
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

/// First/second moment accumulators, one pair per parameter tensor.
struct AdamWState {
    long long step = 0;
    std::vector<RealTensor> m, v;

    void init(const std::vector<Parameter*>& params) {
        step = 0;
        m.clear();
        v.clear();
        for (const Parameter* p : params) {
            m.push_back(RealTensor::zeros_like(p->value));
            v.push_back(RealTensor::zeros_like(p->value));
        }
    }
};

/// Decoupled weight decay AdamW update with bias correction:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
inline void adamw_step(AdamWState& state, const std::vector<Parameter*>& params,
                       const AdamWConfig& cfg) {
    if (state.m.size() != params.size())
        throw DimensionError("adamw_step: state/parameter count mismatch");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        RealTensor& value = params[i]->value;
        const RealTensor& grad = params[i]->grad;
        RealTensor& m = state.m[i];
        RealTensor& v = state.v[i];
        if (grad.numel() != value.numel())
            throw DimensionError("adamw_step: gradient shape mismatch for " + params[i]->name);
        for (std::size_t j = 0; j < value.numel(); ++j) {
            const double g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            value[j] -= cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) +
                                  cfg.weight_decay * value[j]);
        }
    }
}

}  // namespace fmchest
