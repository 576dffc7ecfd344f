#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "fmchest/channel.hpp"
#include "fmchest/checkpoint.hpp"
#include "fmchest/error.hpp"
#include "fmchest/nn.hpp"
#include "fmchest/optim.hpp"
#include "fmchest/tensor.hpp"

namespace fmchest {

struct FlowPathConfig {
    double sigma_min = 0.0;    // path width at t = 1
    double sigma_tilde = 0.1;  // corruption level defining the source distribution

    void validate() const {
        if (!(sigma_min >= 0.0) || sigma_min >= 1.0)
            throw InvalidParameter("flow config: sigma_min must be in [0, 1)");
        if (!(sigma_tilde > 0.0) || !std::isfinite(sigma_tilde))
            throw InvalidParameter("flow config: sigma_tilde must be finite and > 0");
    }
};

/// Source-distribution sample H0 = H1 + E_tilde with E_tilde ~ CN(0, sigma_tilde^2).
/// Returns (h0, e_tilde).
inline std::pair<ComplexMatrix, ComplexMatrix> corrupt(const ComplexMatrix& h1,
                                                       double sigma_tilde, Rng& rng) {
    if (!(sigma_tilde > 0.0) || !std::isfinite(sigma_tilde))
        throw InvalidParameter("corrupt: sigma_tilde must be finite and > 0");
    ComplexMatrix e_tilde = randn_complex(rng, h1.rows(), h1.cols(), sigma_tilde);
    return {add(h1, e_tilde), std::move(e_tilde)};
}

/// Point on the conditional path: t*H1 + (1 - (1 - sigma_min)*t)*H0.
inline ComplexMatrix flow_point(const ComplexMatrix& h0, const ComplexMatrix& h1, double t,
                                double sigma_min) {
    if (!h0.same_shape(h1)) throw DimensionError("flow_point: shape mismatch");
    if (!(t >= 0.0 && t <= 1.0)) throw InvalidParameter("flow_point: t must be in [0, 1]");
    const double a = 1.0 - (1.0 - sigma_min) * t;
    ComplexMatrix out(h0.rows(), h0.cols());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = t * h1.data()[i] + a * h0.data()[i];
    return out;
}

/// Conditional velocity H1 - (1 - sigma_min)*H0; equals -E_tilde for sigma_min = 0.
inline ComplexMatrix target_velocity(const ComplexMatrix& h0, const ComplexMatrix& h1,
                                     double sigma_min) {
    if (!h0.same_shape(h1)) throw DimensionError("target_velocity: shape mismatch");
    ComplexMatrix out(h0.rows(), h0.cols());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = h1.data()[i] - (1.0 - sigma_min) * h0.data()[i];
    return out;
}

/// One training triple: endpoints plus the path time to evaluate at.
struct FlowSample {
    ComplexMatrix h0, h1;
    double t = 0.0;
};

namespace detail {

inline double squared_frobenius(const RealTensor& t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < t.numel(); ++i) acc += t[i] * t[i];
    return acc;
}

}  // namespace detail

/// CFM regression loss for an arbitrary velocity field: mean over samples of
/// || u(H_t, t) - (H1 - (1 - sigma_min) H0) ||_F^2 on the [2, M, N] tensors.
template <typename VelocityFn>
double cfm_loss_value(VelocityFn&& u, const std::vector<FlowSample>& samples,
                      const FlowPathConfig& cfg) {
    if (samples.empty()) throw InvalidParameter("cfm_loss: empty batch");
    cfg.validate();
    double acc = 0.0;
    for (const FlowSample& s : samples) {
        const RealTensor xt = complex_to_tensor(flow_point(s.h0, s.h1, s.t, cfg.sigma_min));
        const RealTensor target = complex_to_tensor(target_velocity(s.h0, s.h1, cfg.sigma_min));
        RealTensor r = u(xt, s.t);
        for (std::size_t i = 0; i < r.numel(); ++i) r[i] -= target[i];
        acc += detail::squared_frobenius(r);
    }
    return acc / static_cast<double>(samples.size());
}

/// Loss plus gradient accumulation into the model for fixed (h0, h1, t)
/// triples. Callers zero the gradients beforehand.
inline double cfm_loss_samples(VelocityFieldModel& model, const std::vector<FlowSample>& samples,
                               const FlowPathConfig& cfg) {
    if (samples.empty()) throw InvalidParameter("cfm_loss: empty batch");
    cfg.validate();
    const double inv_b = 1.0 / static_cast<double>(samples.size());
    double acc = 0.0;
    for (const FlowSample& s : samples) {
        const RealTensor xt = complex_to_tensor(flow_point(s.h0, s.h1, s.t, cfg.sigma_min));
        const RealTensor target = complex_to_tensor(target_velocity(s.h0, s.h1, cfg.sigma_min));
        RealTensor r = model.forward(xt, s.t);
        for (std::size_t i = 0; i < r.numel(); ++i) r[i] -= target[i];
        acc += detail::squared_frobenius(r);
        RealTensor upstream = RealTensor::zeros_like(r);
        for (std::size_t i = 0; i < r.numel(); ++i) upstream[i] = 2.0 * inv_b * r[i];
        model.backward(upstream);
    }
    return acc * inv_b;
}

/// Spec-facing objective: draws t ~ U[0,1] per (h0, h1) pair, then evaluates
/// the regression loss and accumulates gradients.
inline double cfm_loss(VelocityFieldModel& model,
                       const std::vector<std::pair<ComplexMatrix, ComplexMatrix>>& batch,
                       const FlowPathConfig& cfg, Rng& rng) {
    std::vector<FlowSample> samples;
    samples.reserve(batch.size());
    for (const auto& [h0, h1] : batch) samples.push_back({h0, h1, rng.uniform()});
    return cfm_loss_samples(model, samples, cfg);
}

// ---- training loop -----------------------------------------------------------------

struct TrainConfig {
    int epochs = 30;
    int batch_size = 32;
    FlowPathConfig flow;
    AdamWConfig optimizer;
    int checkpoint_every = 0;     // write <checkpoint_path>.epochN every N epochs when > 0
    std::uint64_t seed = 0;
    std::string log_path;         // per-epoch CSV: epoch,train_loss,val_loss,wall_seconds
    std::string checkpoint_path;  // best-validation checkpoint destination

    void validate() const {
        if (epochs < 1 || batch_size < 1)
            throw InvalidParameter("train config: epochs and batch_size must be >= 1");
        flow.validate();
    }
};

struct EpochLog {
    int epoch;
    double train_loss;
    double val_loss;
    double wall_seconds;
};

struct TrainResult {
    VelocityFieldModel model;
    double best_val_loss;
    int best_epoch;
    std::vector<EpochLog> log;
};

namespace detail {

inline std::vector<RealTensor> snapshot_params(std::vector<Parameter*> params) {
    std::vector<RealTensor> out;
    out.reserve(params.size());
    for (const Parameter* p : params) out.push_back(p->value);
    return out;
}

inline void restore_params(std::vector<Parameter*> params, const std::vector<RealTensor>& snap) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = snap[i];
}

}  // namespace detail

/// Fixed corrupted validation triples derived from the training seed, so
/// per-epoch validation losses are comparable across epochs.
inline std::vector<FlowSample> make_validation_samples(const ChannelDataset& data,
                                                       const FlowPathConfig& flow,
                                                       std::uint64_t seed) {
    Rng val_rng = Rng(seed).child(0xFFFFFFFFULL);
    std::vector<FlowSample> out;
    for (int i = 0; i < data.sizes.val; ++i) {
        auto [h0, e] = corrupt(data.val(i), flow.sigma_tilde, val_rng);
        out.push_back({std::move(h0), data.val(i), val_rng.uniform()});
    }
    return out;
}

/// Algorithm-1 style offline training: per epoch, draw fresh corruption noise
/// per sample, sweep shuffled mini-batches of {corrupt -> flow_point ->
/// cfm_loss -> adamw_step}, and track validation loss on a fixed corrupted
/// validation set. Returns the best-validation checkpoint.
inline TrainResult train_fm(const ChannelDataset& data, const NetworkConfig& net_cfg,
                            const TrainConfig& cfg) {
    cfg.validate();
    if (data.sizes.train < 1) throw InvalidParameter("train_fm: dataset has no training split");

    VelocityFieldModel model(net_cfg);
    auto params = model.parameters();
    AdamWState opt;
    opt.init(params);
    Rng root(cfg.seed);

    std::vector<FlowSample> val_samples = make_validation_samples(data, cfg.flow, cfg.seed);
    const auto val_loss_of = [&](VelocityFieldModel& m) {
        if (val_samples.empty()) return std::numeric_limits<double>::quiet_NaN();
        return cfm_loss_value([&m](const RealTensor& x, double t) { return m.forward(x, t); },
                              val_samples, cfg.flow);
    };

    double best_val = val_loss_of(model);  // epoch-0 (untrained) baseline
    int best_epoch = 0;
    std::vector<RealTensor> best_params = detail::snapshot_params(params);
    const bool track_val = !val_samples.empty();

    std::ofstream log_file;
    if (!cfg.log_path.empty()) {
        log_file.open(cfg.log_path);
        if (!log_file) throw IoError("train_fm: cannot open log file " + cfg.log_path);
        log_file << "epoch,train_loss,val_loss,wall_seconds\n";
    }

    std::vector<EpochLog> log;
    std::vector<int> order(static_cast<std::size_t>(data.sizes.train));
    std::iota(order.begin(), order.end(), 0);
    const auto t_start = std::chrono::steady_clock::now();

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng epoch_rng = root.child(static_cast<std::uint64_t>(epoch));
        for (int i = data.sizes.train - 1; i > 0; --i) {
            const int j = static_cast<int>(epoch_rng.uniform() * (i + 1));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        double epoch_loss = 0.0;
        int n_batches = 0;
        for (int start = 0; start < data.sizes.train; start += cfg.batch_size) {
            const int end = std::min(start + cfg.batch_size, data.sizes.train);
            std::vector<FlowSample> batch;
            batch.reserve(static_cast<std::size_t>(end - start));
            for (int k = start; k < end; ++k) {
                const ComplexMatrix& h1 = data.train(order[static_cast<std::size_t>(k)]);
                auto [h0, e] = corrupt(h1, cfg.flow.sigma_tilde, epoch_rng);
                batch.push_back({std::move(h0), h1, epoch_rng.uniform()});
            }
            model.zero_grad();
            const double loss = cfm_loss_samples(model, batch, cfg.flow);
            if (!std::isfinite(loss))
                throw TrainingError("train_fm: non-finite loss at epoch " +
                                    std::to_string(epoch) + ", batch " +
                                    std::to_string(n_batches));
            adamw_step(opt, params, cfg.optimizer);
            epoch_loss += loss;
            ++n_batches;
        }
        epoch_loss /= std::max(1, n_batches);

        const double val = val_loss_of(model);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        log.push_back({epoch, epoch_loss, val, wall});
        if (log_file) {
            log_file << epoch << ',' << epoch_loss << ',' << val << ',' << wall << '\n';
            log_file.flush();
        }
        if (!track_val || val < best_val) {
            best_val = val;
            best_epoch = epoch;
            best_params = detail::snapshot_params(params);
        }
        if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() &&
            epoch % cfg.checkpoint_every == 0) {
            save_fm_checkpoint(model, cfg.flow.sigma_tilde,
                               cfg.checkpoint_path + ".epoch" + std::to_string(epoch));
        }
    }

    detail::restore_params(params, best_params);
    if (!cfg.checkpoint_path.empty())
        save_fm_checkpoint(model, cfg.flow.sigma_tilde, cfg.checkpoint_path);
    return {std::move(model), best_val, best_epoch, std::move(log)};
}

}  // namespace fmchest
