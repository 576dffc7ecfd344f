#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fmchest/error.hpp"
#include "fmchest/nn.hpp"
#include "fmchest/pilot.hpp"
#include "fmchest/tensor.hpp"

namespace fmchest {

enum class UpdateRule {
    standard_euler,  // H += (1/S) * u(H, t)
    paper_literal,   // H += (s/S) * u(H, t): growing coefficient, kept for experiments
};

struct SamplerConfig {
    int steps = 5;
    UpdateRule update_rule = UpdateRule::standard_euler;
    bool record_trajectory = false;

    void validate() const {
        if (steps < 1) throw InvalidParameter("sampler config: steps must be >= 1");
    }
};

/// Integrate dH/dt = u(H, t) from t = 0 to 1 with S explicit Euler steps,
/// feeding the left-endpoint time t = (s-1)/S at step s. Any state-independent
/// field is integrated exactly by the standard rule. The paper-literal rule
/// multiplies step s by s/S instead of 1/S.
template <typename VelocityFn>
ComplexMatrix euler_integrate(VelocityFn&& u, const ComplexMatrix& h_init,
                              const SamplerConfig& cfg,
                              std::vector<ComplexMatrix>* trajectory = nullptr) {
    cfg.validate();
    const double dt = 1.0 / cfg.steps;
    ComplexMatrix h = h_init;
    if (cfg.record_trajectory && trajectory) trajectory->push_back(h);
    for (int s = 1; s <= cfg.steps; ++s) {
        const double t = (s - 1) * dt;
        const double coeff = (cfg.update_rule == UpdateRule::paper_literal) ? s * dt : dt;
        const ComplexMatrix v = u(h, t);
        if (!v.same_shape(h)) throw DimensionError("euler_integrate: velocity shape mismatch");
        for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += coeff * v.data()[i];
        if (!h.is_finite())
            throw SamplerError("euler_integrate: non-finite state at step " + std::to_string(s));
        if (cfg.record_trajectory && trajectory) trajectory->push_back(h);
    }
    return h;
}

/// Euler sampling with the trained velocity field, converting through the
/// dual-channel tensor representation at each evaluation.
inline ComplexMatrix euler_estimate(VelocityFieldModel& model, const ComplexMatrix& h_init,
                                    const SamplerConfig& cfg,
                                    std::vector<ComplexMatrix>* trajectory = nullptr) {
    return euler_integrate(
        [&model](const ComplexMatrix& h, double t) {
            return tensor_to_complex(model.forward(complex_to_tensor(h), t));
        },
        h_init, cfg, trajectory);
}

/// Full estimation path: LS initialization from the measurement, then Euler
/// refinement along the learned flow.
inline ComplexMatrix estimate_channel(VelocityFieldModel& model, const Measurement& meas,
                                      double pilot_power, const SamplerConfig& cfg,
                                      std::vector<ComplexMatrix>* trajectory = nullptr) {
    const ComplexMatrix h_ls = ls_estimate(meas, pilot_power);
    return euler_estimate(model, h_ls, cfg, trajectory);
}

}  // namespace fmchest
