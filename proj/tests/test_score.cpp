#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fmchest/channel.hpp"
#include "fmchest/score.hpp"

using namespace fmchest;

namespace {

NetworkConfig tiny_net(std::uint64_t seed) {
    NetworkConfig cfg;
    cfg.base_channels = 4;
    cfg.level_multipliers = {1, 2};
    cfg.res_blocks_per_level = 1;
    cfg.attention_levels = {1};
    cfg.time_embed_dim = 8;
    cfg.seed = seed;
    return cfg;
}

ChannelDataset toy_dataset(int m, int n, int train, int val, int test, std::uint64_t seed) {
    ChannelModelConfig cfg;
    cfg.m_rx = m;
    cfg.n_tx = n;
    cfg.seed = seed;
    return build_dataset(cfg, {train, val, test});
}

}  // namespace

TEST_CASE("dsm loss oracle and zero-network floor") {
    NoiseLadderConfig ladder;
    ladder.sigma_max = 1.0;
    ladder.sigma_min = 0.05;

    const ChannelDataset data = toy_dataset(4, 8, 1000, 1, 1, 31);
    Rng rng(32);
    std::vector<DsmSample> samples;
    for (int i = 0; i < data.sizes.train; ++i)
        samples.push_back(make_dsm_sample(data.train(i), ladder, rng));

    SECTION("an oracle predicting the negated noise has zero loss") {
        std::size_t idx = 0;
        const double loss = dsm_loss_value(
            [&](const RealTensor&, double) { return samples[idx++].target; }, samples);
        REQUIRE(loss < 1e-24);
    }

    SECTION("the zero network sits at the E||Z||^2 = M*N floor") {
        ScoreModel model(tiny_net(33), ladder);  // zero output head
        const double loss = dsm_loss_samples(model, samples, /*with_grad=*/false);
        REQUIRE(loss == Catch::Approx(4.0 * 8.0).epsilon(0.05));
    }
}

TEST_CASE("dsm training overfits a small set") {
    const ChannelDataset data = toy_dataset(8, 8, 16, 4, 2, 41);
    NoiseLadderConfig ladder;
    ladder.sigma_max = 1.0;
    ladder.sigma_min = 0.05;
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.batch_size = 16;
    cfg.optimizer.lr = 1e-2;
    cfg.optimizer.weight_decay = 0.0;
    cfg.seed = 6;
    NetworkConfig net = tiny_net(42);
    net.base_channels = 16;
    net.time_embed_dim = 32;

    const DsmTrainResult result = dsm_train(data, net, ladder, cfg);
    REQUIRE(result.log.size() == 200);
    REQUIRE(result.log.back().train_loss <= 0.5 * result.log.front().train_loss);
    for (const EpochLog& e : result.log) REQUIRE(result.best_val_loss <= e.val_loss + 1e-12);
}

TEST_CASE("annealed langevin degenerate updates") {
    Rng rng(51);
    const RealTensor init = randn_real(rng, {2, 4, 4}, 1.0);

    SECTION("zero score and no noise injection is the identity") {
        LangevinConfig cfg;
        cfg.n_levels = 10;
        cfg.steps_per_level = 3;
        cfg.noise_scale = 0.0;
        Rng r(1);
        const RealTensor out = annealed_langevin_tensor(
            [](const RealTensor& x, double) { return RealTensor::zeros_like(x); }, init, cfg, r);
        for (std::size_t i = 0; i < out.numel(); ++i) REQUIRE(out[i] == init[i]);
    }

    SECTION("K=1, L=1 without noise is one step of size eps0") {
        LangevinConfig cfg;
        cfg.n_levels = 1;
        cfg.steps_per_level = 1;
        cfg.eps0 = 0.25;
        cfg.noise_scale = 0.0;
        Rng r(2);
        const RealTensor out = annealed_langevin_tensor(
            [](const RealTensor& x, double) {
                RealTensor s = x;
                for (std::size_t i = 0; i < s.numel(); ++i) s[i] *= 2.0;
                return s;
            },
            init, cfg, r);
        for (std::size_t i = 0; i < out.numel(); ++i)
            REQUIRE(out[i] == Catch::Approx(init[i] + 0.25 * 2.0 * init[i]).epsilon(1e-12));
    }

    SECTION("evaluation counter is exactly K*L") {
        LangevinConfig cfg;
        cfg.n_levels = 100;
        cfg.steps_per_level = 3;
        Rng r(3);
        long long evals = 0;
        annealed_langevin_tensor(
            [](const RealTensor& x, double) { return RealTensor::zeros_like(x); }, init, cfg, r,
            &evals);
        REQUIRE(evals == 300);

        // the model-backed sampler counts through the network eval counter
        NoiseLadderConfig ladder;
        ScoreModel model(tiny_net(52), ladder);
        LangevinConfig small = cfg;
        small.n_levels = 20;
        Rng r2(4);
        model.net.eval_count = 0;
        annealed_langevin(model, tensor_to_complex(init), small, r2);
        REQUIRE(model.net.eval_count == 60);
    }
}

TEST_CASE("annealed langevin reproduces a 1-D Gaussian target") {
    // analytic score of N(mu, v) smoothed with noise level sigma
    const double mu = 1.0, v = 0.25;
    const auto score = [&](const RealTensor& x, double sigma) {
        RealTensor s = x;
        s[0] = -(x[0] - mu) / (v + sigma * sigma);
        return s;
    };
    LangevinConfig cfg;
    cfg.n_levels = 60;
    cfg.steps_per_level = 20;
    cfg.sigma_max = 2.0;
    cfg.sigma_min = 0.05;
    cfg.eps0 = 5e-3;

    Rng root(61);
    const int chains = 10000;
    double sum = 0.0, sum_sq = 0.0;
    for (int c = 0; c < chains; ++c) {
        Rng rng = root.child(static_cast<std::uint64_t>(c));
        RealTensor x({1});
        const RealTensor out = annealed_langevin_tensor(score, x, cfg, rng);
        sum += out[0];
        sum_sq += out[0] * out[0];
    }
    const double mean = sum / chains;
    const double var = sum_sq / chains - mean * mean;
    REQUIRE(mean == Catch::Approx(mu).epsilon(0.05));
    REQUIRE(var == Catch::Approx(v).epsilon(0.05));
}

TEST_CASE("langevin sampling is reproducible under a fixed seed") {
    NoiseLadderConfig ladder;
    ScoreModel model(tiny_net(71), ladder);
    Rng prng(72);
    for (Parameter* p : model.net.parameters())
        for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] += 0.05 * prng.normal();

    Rng rng(73);
    const ComplexMatrix init = randn_complex(rng, 8, 8, 1.0);
    LangevinConfig cfg;
    cfg.n_levels = 10;
    cfg.steps_per_level = 2;
    cfg.eps0 = 1e-4;

    Rng ra(99), rb(99);
    const ComplexMatrix a = annealed_langevin(model, init, cfg, ra);
    const ComplexMatrix b = annealed_langevin(model, init, cfg, rb);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a.data()[i] == b.data()[i]);
}

TEST_CASE("langevin divergence names the level and update") {
    LangevinConfig cfg;
    cfg.n_levels = 5;
    cfg.steps_per_level = 2;
    cfg.eps0 = 1.0;
    cfg.noise_scale = 0.0;
    Rng rng(81);
    RealTensor init({1});
    init[0] = 1.0;
    int calls = 0;
    try {
        annealed_langevin_tensor(
            [&calls](const RealTensor& x, double) {
                ++calls;
                RealTensor s = x;
                s[0] = (calls == 4) ? std::numeric_limits<double>::quiet_NaN() : 0.0;
                return s;
            },
            init, cfg, rng);
        FAIL("expected SamplerError");
    } catch (const SamplerError& e) {
        REQUIRE(std::string(e.what()).find("level 1") != std::string::npos);
    }
}

TEST_CASE("sm checkpoint round-trips and rejects corruption") {
    NoiseLadderConfig ladder;
    ladder.sigma_max = 1.5;
    ladder.sigma_min = 0.02;
    ScoreModel model(tiny_net(91), ladder);
    Rng rng(92);
    for (Parameter* p : model.net.parameters())
        for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] += 0.1 * rng.normal();

    const auto path = (std::filesystem::temp_directory_path() / "fmchest_sm_ckpt.bin").string();
    save_sm_checkpoint(model, path);
    ScoreModel loaded = load_sm_checkpoint(path);
    REQUIRE(loaded.ladder.sigma_max == 1.5);
    REQUIRE(loaded.ladder.sigma_min == 0.02);

    auto p1 = model.net.parameters();
    auto p2 = loaded.net.parameters();
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i)
        for (std::size_t j = 0; j < p1[i]->value.numel(); ++j)
            REQUIRE(p1[i]->value[j] == p2[i]->value[j]);

    // an FM checkpoint cannot be loaded as an SM checkpoint
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    in.close();
    bytes[0] = 'F';
    bytes[1] = 'M';
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    REQUIRE_THROWS_AS(load_sm_checkpoint(path), FormatError);
    std::filesystem::remove(path);
}
