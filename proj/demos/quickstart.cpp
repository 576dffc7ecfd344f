// Minimal end-to-end walkthrough: synthesize a small channel dataset, train
// the flow-matching velocity field for a few epochs, and compare the Euler
// estimator against plain LS at one SNR. Runs in about a minute; for real
// experiments use the fmchest CLI with larger budgets.

#include <cstdio>

#include "fmchest/fmchest.hpp"

using namespace fmchest;

int main() {
    ChannelModelConfig channel;
    channel.m_rx = 8;
    channel.n_tx = 16;
    channel.seed = 7;
    const ChannelDataset data = build_dataset(channel, {256, 32, 64});
    std::printf("dataset: %d train / %d val / %d test samples of %dx%d\n", data.sizes.train,
                data.sizes.val, data.sizes.test, channel.m_rx, channel.n_tx);

    NetworkConfig net;
    net.base_channels = 8;
    net.level_multipliers = {1, 2};
    net.attention_levels = {1};
    net.time_embed_dim = 32;
    net.seed = 1;

    TrainConfig train;
    train.epochs = 10;
    train.batch_size = 32;
    train.flow.sigma_tilde = 0.1;
    train.optimizer.lr = 3e-3;
    train.seed = 2;
    TrainResult result = train_fm(data, net, train);
    std::printf("trained %d epochs: loss %.4f -> %.4f (best val %.4f at epoch %d)\n",
                train.epochs, result.log.front().train_loss, result.log.back().train_loss,
                result.best_val_loss, result.best_epoch);

    PilotConfig pilots;
    pilots.n_tx = channel.n_tx;
    pilots.t_slots = channel.n_tx;
    pilots.pilot_power = 1.0;
    const ComplexMatrix p = make_pilots(pilots);

    const double snr_db = 10.0;
    const double sigma = snr_to_sigma(snr_db, pilots.pilot_power);
    SamplerConfig sampler;
    sampler.steps = 5;

    Rng rng(99);
    double ls_ratio = 0.0, fm_ratio = 0.0;
    for (int i = 0; i < data.sizes.test; ++i) {
        const ComplexMatrix& h = data.test(i);
        Rng trial = rng.child(static_cast<std::uint64_t>(i));
        const Measurement meas = measure(h, p, sigma, trial);
        const ComplexMatrix ls = ls_estimate(meas, pilots.pilot_power);
        const ComplexMatrix fm = estimate_channel(result.model, meas, pilots.pilot_power, sampler);
        ls_ratio += frobenius_norm_sq(sub(ls, h)) / frobenius_norm_sq(h);
        fm_ratio += frobenius_norm_sq(sub(fm, h)) / frobenius_norm_sq(h);
    }
    std::printf("NMSE at %.0f dB SNR over %d samples: LS %.2f dB, FM (S=%d) %.2f dB\n", snr_db,
                data.sizes.test, 10.0 * std::log10(ls_ratio / data.sizes.test), sampler.steps,
                10.0 * std::log10(fm_ratio / data.sizes.test));
    return 0;
}
