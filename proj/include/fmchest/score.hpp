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
#include "fmchest/flow.hpp"
#include "fmchest/nn.hpp"
#include "fmchest/optim.hpp"

namespace fmchest {

// Simplified denoising-score-matching baseline. It exists to provide a
// correctness-sane annealed-Langevin sampler and a fair wall-clock
// comparison against the flow sampler using the same network backbone; it is
// not a faithful posterior-sampling estimator.

struct NoiseLadderConfig {
    double sigma_max = 1.0;
    double sigma_min = 0.01;

    void validate() const {
        if (!(sigma_max > sigma_min) || !(sigma_min > 0.0))
            throw InvalidParameter("noise ladder: need sigma_max > sigma_min > 0");
    }
};

struct LangevinConfig {
    int n_levels = 500;       // K noise levels, geometric from sigma_max to sigma_min
    int steps_per_level = 3;  // L updates per level
    double sigma_max = 1.0;
    double sigma_min = 0.01;
    double eps0 = 2e-5;  // base step size at the final (smallest) level
    std::uint64_t seed = 0;
    double noise_scale = 1.0;  // 0 disables stochastic injection (diagnostics only)

    void validate() const {
        if (n_levels < 1 || steps_per_level < 1)
            throw InvalidParameter("langevin config: K and L must be >= 1");
        if (!(sigma_max > 0.0) || !(sigma_min > 0.0) || !(sigma_max >= sigma_min))
            throw InvalidParameter("langevin config: need sigma_max >= sigma_min > 0");
        if (!(eps0 > 0.0)) throw InvalidParameter("langevin config: eps0 must be > 0");
    }

    double sigma_at(int k) const {
        if (n_levels == 1) return sigma_max;
        const double r = std::pow(sigma_min / sigma_max,
                                  static_cast<double>(k) / (n_levels - 1));
        return sigma_max * r;
    }
};

/// Noise-conditional score network sharing the velocity-field backbone. The
/// network regresses the negated unit noise -Z from H + sigma*Z; the score is
/// the network output divided by sigma. Conditioning maps sigma to [0, 1]
/// log-linearly over the training ladder.
struct ScoreModel {
    VelocityFieldModel net;
    NoiseLadderConfig ladder;

    ScoreModel(const NetworkConfig& cfg, const NoiseLadderConfig& lad)
        : net(cfg), ladder(lad) {
        lad.validate();
    }

    double condition(double sigma) const {
        const double c = std::log(sigma / ladder.sigma_min) /
                         std::log(ladder.sigma_max / ladder.sigma_min);
        return std::clamp(c, 0.0, 1.0);
    }

    RealTensor predict_noise(const RealTensor& x, double sigma) {
        return net.forward(x, condition(sigma));
    }

    RealTensor score(const RealTensor& x, double sigma) {
        RealTensor s = predict_noise(x, sigma);
        const double inv = 1.0 / sigma;
        for (std::size_t i = 0; i < s.numel(); ++i) s[i] *= inv;
        return s;
    }
};

// ---- DSM training -------------------------------------------------------------

/// One DSM regression triple: corrupted input, negated-noise target, sigma.
struct DsmSample {
    RealTensor x;
    RealTensor target;
    double sigma;
};

/// sigma^2-weighted DSM loss for an arbitrary noise predictor:
/// mean over samples of || f(H + sigma Z, sigma) + Z ||^2.
template <typename NoiseFn>
double dsm_loss_value(NoiseFn&& f, const std::vector<DsmSample>& samples) {
    if (samples.empty()) throw InvalidParameter("dsm_loss: empty batch");
    double acc = 0.0;
    for (const DsmSample& s : samples) {
        RealTensor r = f(s.x, s.sigma);
        for (std::size_t i = 0; i < r.numel(); ++i) r[i] -= s.target[i];
        for (std::size_t i = 0; i < r.numel(); ++i) acc += r[i] * r[i];
    }
    return acc / static_cast<double>(samples.size());
}

/// Model DSM loss; with the zero network the per-sample expectation is
/// E||Z||^2 = M*N. Accumulates gradients when with_grad is set.
inline double dsm_loss_samples(ScoreModel& model, const std::vector<DsmSample>& samples,
                               bool with_grad) {
    if (samples.empty()) throw InvalidParameter("dsm_loss: empty batch");
    const double inv_b = 1.0 / static_cast<double>(samples.size());
    double acc = 0.0;
    for (const DsmSample& s : samples) {
        RealTensor r = model.predict_noise(s.x, s.sigma);
        for (std::size_t i = 0; i < r.numel(); ++i) r[i] -= s.target[i];
        double sample_loss = 0.0;
        for (std::size_t i = 0; i < r.numel(); ++i) sample_loss += r[i] * r[i];
        acc += sample_loss;
        if (with_grad) {
            RealTensor upstream = RealTensor::zeros_like(r);
            for (std::size_t i = 0; i < r.numel(); ++i) upstream[i] = 2.0 * inv_b * r[i];
            model.net.backward(upstream);
        }
    }
    return acc * inv_b;
}

inline DsmSample make_dsm_sample(const ComplexMatrix& h1, const NoiseLadderConfig& ladder,
                                 Rng& rng) {
    const double sigma =
        std::exp(rng.uniform(std::log(ladder.sigma_min), std::log(ladder.sigma_max)));
    const ComplexMatrix z = randn_complex(rng, h1.rows(), h1.cols(), 1.0);
    DsmSample s;
    s.sigma = sigma;
    ComplexMatrix x = h1;
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += sigma * z.data()[i];
    s.x = complex_to_tensor(x);
    s.target = complex_to_tensor(scale(z, -1.0));
    return s;
}

struct DsmTrainResult {
    ScoreModel model;
    double best_val_loss;
    int best_epoch;
    std::vector<EpochLog> log;
};

/// Denoising score matching over a log-uniform sigma range; mirrors the flow
/// trainer (fresh noise per epoch, fixed validation triples, best-validation
/// checkpoint). The TrainConfig flow settings are unused here.
inline DsmTrainResult dsm_train(const ChannelDataset& data, const NetworkConfig& net_cfg,
                                const NoiseLadderConfig& ladder, const TrainConfig& cfg) {
    ladder.validate();
    if (cfg.epochs < 1 || cfg.batch_size < 1)
        throw InvalidParameter("dsm_train: epochs and batch_size must be >= 1");
    if (data.sizes.train < 1) throw InvalidParameter("dsm_train: dataset has no training split");

    ScoreModel model(net_cfg, ladder);
    auto params = model.net.parameters();
    AdamWState opt;
    opt.init(params);
    Rng root(cfg.seed);

    Rng val_rng = root.child(0xFFFFFFFFULL);
    std::vector<DsmSample> val_samples;
    for (int i = 0; i < data.sizes.val; ++i)
        val_samples.push_back(make_dsm_sample(data.val(i), ladder, val_rng));
    const auto val_loss_of = [&]() {
        if (val_samples.empty()) return std::numeric_limits<double>::quiet_NaN();
        return dsm_loss_samples(model, val_samples, /*with_grad=*/false);
    };

    double best_val = val_loss_of();
    int best_epoch = 0;
    std::vector<RealTensor> best_params = detail::snapshot_params(params);
    const bool track_val = !val_samples.empty();

    std::ofstream log_file;
    if (!cfg.log_path.empty()) {
        log_file.open(cfg.log_path);
        if (!log_file) throw IoError("dsm_train: cannot open log file " + cfg.log_path);
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
            std::vector<DsmSample> batch;
            batch.reserve(static_cast<std::size_t>(end - start));
            for (int k = start; k < end; ++k)
                batch.push_back(
                    make_dsm_sample(data.train(order[static_cast<std::size_t>(k)]), ladder,
                                    epoch_rng));
            model.net.zero_grad();
            const double loss = dsm_loss_samples(model, batch, /*with_grad=*/true);
            if (!std::isfinite(loss))
                throw TrainingError("dsm_train: non-finite loss at epoch " +
                                    std::to_string(epoch) + ", batch " +
                                    std::to_string(n_batches));
            adamw_step(opt, params, cfg.optimizer);
            epoch_loss += loss;
            ++n_batches;
        }
        epoch_loss /= std::max(1, n_batches);

        const double val = val_loss_of();
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
    }

    detail::restore_params(params, best_params);
    return {std::move(model), best_val, best_epoch, std::move(log)};
}

// ---- annealed Langevin sampling -------------------------------------------------

/// K geometric noise levels, L updates each:
///   x <- x + alpha_k * score(x, sigma_k) + sqrt(2 alpha_k) * z
/// with alpha_k = eps0 * sigma_k^2 / sigma_{K-1}^2 and z standard normal per
/// real component. evals, when given, counts score evaluations (exactly K*L).
template <typename ScoreFn>
RealTensor annealed_langevin_tensor(ScoreFn&& score, const RealTensor& init,
                                    const LangevinConfig& cfg, Rng& rng,
                                    long long* evals = nullptr) {
    cfg.validate();
    const double sigma_last_sq = cfg.sigma_at(cfg.n_levels - 1) * cfg.sigma_at(cfg.n_levels - 1);
    RealTensor x = init;
    for (int k = 0; k < cfg.n_levels; ++k) {
        const double sigma_k = cfg.sigma_at(k);
        const double alpha = cfg.eps0 * sigma_k * sigma_k / sigma_last_sq;
        const double noise_std = std::sqrt(2.0 * alpha) * cfg.noise_scale;
        for (int l = 0; l < cfg.steps_per_level; ++l) {
            const RealTensor s = score(x, sigma_k);
            if (evals) ++(*evals);
            for (std::size_t i = 0; i < x.numel(); ++i) {
                x[i] += alpha * s[i];
                if (noise_std > 0.0) x[i] += noise_std * rng.normal();
            }
            if (!x.is_finite())
                throw SamplerError("annealed_langevin: non-finite state at level " +
                                   std::to_string(k) + ", update " + std::to_string(l));
        }
    }
    return x;
}

inline ComplexMatrix annealed_langevin(ScoreModel& model, const ComplexMatrix& h_init,
                                       const LangevinConfig& cfg, Rng& rng) {
    const RealTensor out = annealed_langevin_tensor(
        [&model](const RealTensor& x, double sigma) { return model.score(x, sigma); },
        complex_to_tensor(h_init), cfg, rng);
    return tensor_to_complex(out);
}

// ---- SM checkpoints (SMCKPT01) ----------------------------------------------------

inline void save_sm_checkpoint(ScoreModel& model, const std::string& path) {
    nlohmann::json meta;
    meta["network"] = model.net.config();
    meta["sigma_max"] = model.ladder.sigma_max;
    meta["sigma_min"] = model.ladder.sigma_min;
    detail::write_checkpoint(path, "SMCKPT01", meta, model.net.parameters());
}

inline ScoreModel load_sm_checkpoint(const std::string& path) {
    detail::CheckpointReader r(path);
    const nlohmann::json meta = detail::read_checkpoint_meta(r, "SMCKPT01");
    NoiseLadderConfig ladder;
    ladder.sigma_max = meta.at("sigma_max").get<double>();
    ladder.sigma_min = meta.at("sigma_min").get<double>();
    ScoreModel model(meta.at("network").get<NetworkConfig>(), ladder);
    detail::read_checkpoint_params(r, model.net.parameters());
    return model;
}

}  // namespace fmchest
