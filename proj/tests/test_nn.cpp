#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

#include "fmchest/checkpoint.hpp"
#include "fmchest/nn.hpp"
#include "fmchest/optim.hpp"

using namespace fmchest;
using namespace fmchest::nn;

namespace {

constexpr double kFdStep = 1e-4;
constexpr double kGradTol = 1e-4;

double rel_err(double a, double b) {
    // gradients that are exactly zero mathematically (e.g. attention key
    // bias) only show central-difference roundoff; compare those at the
    // absolute noise floor instead of relatively
    if (std::abs(a) < 1e-7 && std::abs(b) < 1e-7) return 0.0;
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

double dot(const RealTensor& a, const RealTensor& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
    return acc;
}

/// Central finite difference of eval() with respect to one memory slot.
double central_diff(double& slot, const std::function<double()>& eval) {
    const double orig = slot;
    slot = orig + kFdStep;
    const double lp = eval();
    slot = orig - kFdStep;
    const double lm = eval();
    slot = orig;
    return (lp - lm) / (2.0 * kFdStep);
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t want, Rng& rng) {
    std::vector<std::size_t> idx;
    if (n <= want) {
        for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
        std::set<std::size_t> seen;
        while (seen.size() < want)
            seen.insert(static_cast<std::size_t>(rng.uniform() * static_cast<double>(n)));
        idx.assign(seen.begin(), seen.end());
    }
    return idx;
}

/// Checks every parameter gradient (sampled up to 100 per tensor) and the
/// input gradient of a single-input layer against central differences.
template <typename Layer>
void check_layer_gradients(Layer& layer, std::vector<Parameter*> params, const RealTensor& x,
                           Rng& rng) {
    RealTensor input = x;
    Rng up_rng = rng.child(99);
    RealTensor y0 = layer.forward(input);
    RealTensor upstream = randn_real(up_rng, y0.shape(), 1.0);

    for (Parameter* p : params) p->grad.fill(0.0);
    layer.forward(input);
    const RealTensor dx = layer.backward(upstream);

    const auto eval = [&]() { return dot(layer.forward(input), upstream); };
    for (Parameter* p : params) {
        for (std::size_t i : sample_indices(p->value.numel(), 100, rng)) {
            const double fd = central_diff(p->value[i], eval);
            INFO(p->name << "[" << i << "] analytic=" << p->grad[i] << " fd=" << fd);
            REQUIRE(rel_err(p->grad[i], fd) < kGradTol);
        }
    }
    for (std::size_t i : sample_indices(input.numel(), 100, rng)) {
        const double fd = central_diff(input[i], eval);
        INFO("input[" << i << "] analytic=" << dx[i] << " fd=" << fd);
        REQUIRE(rel_err(dx[i], fd) < kGradTol);
    }
}

}  // namespace

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(1);
    SECTION("3x3 stride 1") {
        Conv2d conv("conv", 3, 4, 3, 1, rng);
        std::vector<Parameter*> params;
        conv.collect(params);
        const RealTensor x = randn_real(rng, {3, 6, 8}, 1.0);
        check_layer_gradients(conv, params, x, rng);
    }
    SECTION("3x3 stride 2 (downsample)") {
        Conv2d conv("down", 4, 4, 3, 2, rng);
        std::vector<Parameter*> params;
        conv.collect(params);
        const RealTensor x = randn_real(rng, {4, 8, 8}, 1.0);
        check_layer_gradients(conv, params, x, rng);
    }
    SECTION("1x1 projection") {
        Conv2d conv("proj", 5, 3, 1, 1, rng);
        std::vector<Parameter*> params;
        conv.collect(params);
        const RealTensor x = randn_real(rng, {5, 4, 4}, 1.0);
        check_layer_gradients(conv, params, x, rng);
    }
}

TEST_CASE("group norm gradients match finite differences") {
    Rng rng(2);
    GroupNorm gn("gn", 8);
    // non-trivial scale/shift so the gamma path is exercised
    for (int c = 0; c < 8; ++c) {
        gn.gamma.value[static_cast<std::size_t>(c)] = 0.5 + 0.2 * c;
        gn.beta.value[static_cast<std::size_t>(c)] = 0.1 * c;
    }
    std::vector<Parameter*> params;
    gn.collect(params);
    const RealTensor x = randn_real(rng, {8, 4, 6}, 1.5);
    check_layer_gradients(gn, params, x, rng);
}

TEST_CASE("silu and upsample input gradients match finite differences") {
    Rng rng(3);
    SECTION("silu") {
        SiLU act;
        check_layer_gradients(act, {}, randn_real(rng, {4, 5, 5}, 2.0), rng);
    }
    SECTION("upsample") {
        struct UpsampleWrap {
            RealTensor forward(const RealTensor& x) { return upsample_nearest2x(x); }
            RealTensor backward(const RealTensor& dy) { return upsample_nearest2x_backward(dy); }
        } up;
        check_layer_gradients(up, {}, randn_real(rng, {3, 4, 6}, 1.0), rng);
    }
}

TEST_CASE("linear (time-affine) gradients match finite differences") {
    Rng rng(4);
    Linear lin("lin", 12, 7, rng);
    std::vector<Parameter*> params;
    lin.collect(params);
    check_layer_gradients(lin, params, randn_real(rng, {12}, 1.0), rng);
}

TEST_CASE("linear layer matches the closed-form regression gradient") {
    // loss = ||W x - y||^2 has gradient dW = 2 (W x - y) x^T, db = 2 (W x - y)
    Rng rng(5);
    Linear lin("lin", 6, 4, rng);
    const RealTensor x = randn_real(rng, {6}, 1.0);
    const RealTensor target = randn_real(rng, {4}, 1.0);
    RealTensor out = lin.forward(x);
    RealTensor residual({4});
    for (std::size_t i = 0; i < 4; ++i) residual[i] = 2.0 * (out[i] - target[i]);
    lin.backward(residual);
    for (int o = 0; o < 4; ++o) {
        const double r = 2.0 * (out[static_cast<std::size_t>(o)] - target[static_cast<std::size_t>(o)]);
        REQUIRE(lin.bias.grad[static_cast<std::size_t>(o)] == Catch::Approx(r).epsilon(1e-12));
        for (int i = 0; i < 6; ++i) {
            REQUIRE(lin.weight.grad[static_cast<std::size_t>(o) * 6 + i] ==
                    Catch::Approx(r * x[static_cast<std::size_t>(i)]).epsilon(1e-12));
        }
    }
}

TEST_CASE("residual block gradients match finite differences") {
    Rng rng(6);
    struct ResWrap {
        ResBlock block;
        RealTensor emb;
        RealTensor demb{std::vector<int>{8}};
        RealTensor forward(const RealTensor& x) { return block.forward(x, emb); }
        RealTensor backward(const RealTensor& dy) {
            demb.fill(0.0);
            return block.backward(dy, demb);
        }
    };
    SECTION("channel-preserving") {
        ResWrap w{ResBlock("res", 4, 4, 8, rng), randn_real(rng, {8}, 1.0)};
        std::vector<Parameter*> params;
        w.block.collect(params);
        check_layer_gradients(w, params, randn_real(rng, {4, 4, 8}, 1.0), rng);
    }
    SECTION("channel-changing with 1x1 skip") {
        ResWrap w{ResBlock("res", 4, 6, 8, rng), randn_real(rng, {8}, 1.0)};
        std::vector<Parameter*> params;
        w.block.collect(params);
        check_layer_gradients(w, params, randn_real(rng, {4, 4, 4}, 1.0), rng);
    }
}

TEST_CASE("residual block embedding gradient matches finite differences") {
    Rng rng(7);
    ResBlock block("res", 4, 4, 8, rng);
    RealTensor x = randn_real(rng, {4, 4, 4}, 1.0);
    RealTensor emb = randn_real(rng, {8}, 1.0);
    Rng up_rng(77);
    RealTensor upstream = randn_real(up_rng, {4, 4, 4}, 1.0);

    std::vector<Parameter*> params;
    block.collect(params);
    for (Parameter* p : params) p->grad.fill(0.0);
    block.forward(x, emb);
    RealTensor demb({8});
    block.backward(upstream, demb);

    const auto eval = [&]() { return dot(block.forward(x, emb), upstream); };
    for (std::size_t i = 0; i < emb.numel(); ++i) {
        const double fd = central_diff(emb[i], eval);
        REQUIRE(rel_err(demb[i], fd) < kGradTol);
    }
}

TEST_CASE("attention block gradients match finite differences") {
    Rng rng(8);
    AttentionBlock attn("attn", 8, rng);
    std::vector<Parameter*> params;
    attn.collect(params);
    check_layer_gradients(attn, params, randn_real(rng, {8, 2, 8}, 1.0), rng);
}

TEST_CASE("time embedding basics") {
    const RealTensor e0 = sinusoidal_embedding(0.0, 16);
    for (int i = 0; i < 8; ++i) {
        REQUIRE(e0[static_cast<std::size_t>(i)] == 0.0);       // sines
        REQUIRE(e0[static_cast<std::size_t>(8 + i)] == 1.0);   // cosines
    }
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const RealTensor e = sinusoidal_embedding(rng.uniform(), 32);
        for (std::size_t i = 0; i < e.numel(); ++i) {
            REQUIRE(e[i] <= 1.0);
            REQUIRE(e[i] >= -1.0);
        }
    }
    const RealTensor a = sinusoidal_embedding(0.25, 32);
    const RealTensor b = sinusoidal_embedding(0.75, 32);
    int differing = 0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (std::abs(a[i] - b[i]) > 1e-6) ++differing;
    REQUIRE(differing >= 16);

    REQUIRE_THROWS_AS(sinusoidal_embedding(0.5, 15), InvalidParameter);
}

TEST_CASE("full model forward properties") {
    NetworkConfig cfg;
    cfg.base_channels = 4;
    cfg.level_multipliers = {1, 2};
    cfg.res_blocks_per_level = 1;
    cfg.attention_levels = {1};
    cfg.time_embed_dim = 8;
    cfg.seed = 3;
    VelocityFieldModel model(cfg);
    REQUIRE(model.param_count() > 0);

    Rng rng(10);
    const RealTensor x = randn_real(rng, {2, 8, 8}, 1.0);

    // zero-initialized output head: untrained forward is exactly zero
    const RealTensor y = model.forward(x, 0.3);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) REQUIRE(y[i] == 0.0);

    // determinism: identical (x, t) twice gives bit-identical output
    auto params = model.parameters();
    Rng prng(4);
    for (Parameter* p : params)
        for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] += 0.05 * prng.normal();
    const RealTensor y1 = model.forward(x, 0.6);
    const RealTensor y2 = model.forward(x, 0.6);
    for (std::size_t i = 0; i < y1.numel(); ++i) REQUIRE(y1[i] == y2[i]);
    REQUIRE(model.eval_count == 3);

    // parameter names are unique
    std::set<std::string> names;
    for (Parameter* p : params) names.insert(p->name);
    REQUIRE(names.size() == params.size());

    // spatial dims not divisible by 2^(levels-1) are rejected
    REQUIRE_THROWS_AS(model.forward(randn_real(rng, {2, 7, 8}, 1.0), 0.5), DimensionError);
    REQUIRE_THROWS_AS(model.forward(randn_real(rng, {3, 8, 8}, 1.0), 0.5), DimensionError);
}

TEST_CASE("full model gradients match finite differences on 2x8x8 input") {
    NetworkConfig cfg;
    cfg.base_channels = 4;
    cfg.level_multipliers = {1, 2};
    cfg.res_blocks_per_level = 1;
    cfg.attention_levels = {1};
    cfg.time_embed_dim = 8;
    cfg.seed = 11;
    VelocityFieldModel model(cfg);
    auto params = model.parameters();

    Rng rng(12);
    // zero-init head hides most of the graph from the loss; perturb all params
    for (Parameter* p : params)
        for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] += 0.05 * rng.normal();

    const RealTensor x = randn_real(rng, {2, 8, 8}, 1.0);
    const double t = 0.37;
    Rng up_rng(13);
    const RealTensor y0 = model.forward(x, t);
    const RealTensor upstream = randn_real(up_rng, y0.shape(), 1.0);

    model.zero_grad();
    model.forward(x, t);
    model.backward(upstream);

    const auto eval = [&]() { return dot(model.forward(x, t), upstream); };
    Rng pick(14);
    for (Parameter* p : params) {
        for (std::size_t i : sample_indices(p->value.numel(), 5, pick)) {
            const double fd = central_diff(p->value[i], eval);
            INFO(p->name << "[" << i << "]");
            REQUIRE(rel_err(p->grad[i], fd) < kGradTol);
        }
    }
}

TEST_CASE("model backward state handling") {
    NetworkConfig cfg;
    cfg.base_channels = 4;
    cfg.level_multipliers = {1};
    cfg.res_blocks_per_level = 1;
    cfg.attention_levels = {};
    cfg.time_embed_dim = 8;
    VelocityFieldModel model(cfg);
    RealTensor dy({2, 4, 4});
    REQUIRE_THROWS_AS(model.backward(dy), std::logic_error);

    Rng rng(15);
    const RealTensor x = randn_real(rng, {2, 4, 4}, 1.0);
    model.forward(x, 0.5);
    model.zero_grad();
    model.backward(RealTensor({2, 4, 4}));  // zero upstream
    for (Parameter* p : model.parameters())
        for (std::size_t i = 0; i < p->grad.numel(); ++i) REQUIRE(p->grad[i] == 0.0);
}

TEST_CASE("adamw single-step hand-computed values") {
    // one step on a scalar parameter: w=1, g=1, lr=0.1, wd=0 gives w ~= 0.9
    Parameter w("w", {1});
    w.value[0] = 1.0;
    w.grad[0] = 1.0;
    std::vector<Parameter*> params{&w};
    AdamWState state;
    state.init(params);
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    adamw_step(state, params, cfg);
    // m_hat = 1, v_hat = 1 after bias correction
    REQUIRE(w.value[0] == Catch::Approx(1.0 - 0.1 * (1.0 / (1.0 + cfg.eps))).epsilon(1e-12));
    REQUIRE(w.value[0] == Catch::Approx(0.9).margin(1e-8));
}

TEST_CASE("adamw decoupled decay and no-op cases") {
    Parameter w("w", {2});
    w.value[0] = 1.0;
    w.value[1] = -2.0;
    std::vector<Parameter*> params{&w};
    AdamWState state;
    state.init(params);

    SECTION("zero grads, zero weight decay: parameters unchanged") {
        AdamWConfig cfg;
        cfg.weight_decay = 0.0;
        adamw_step(state, params, cfg);
        REQUIRE(w.value[0] == 1.0);
        REQUIRE(w.value[1] == -2.0);
    }
    SECTION("zero grads, wd=1e-2, lr=1e-5: pure multiplicative decay") {
        AdamWConfig cfg;
        cfg.lr = 1e-5;
        cfg.weight_decay = 1e-2;
        adamw_step(state, params, cfg);
        REQUIRE(w.value[0] == Catch::Approx(1.0 * (1.0 - 1e-7)).epsilon(1e-14));
        REQUIRE(w.value[1] == Catch::Approx(-2.0 * (1.0 - 1e-7)).epsilon(1e-14));
    }
}

TEST_CASE("fm checkpoint round-trips bit-exactly") {
    NetworkConfig cfg;
    cfg.base_channels = 4;
    cfg.level_multipliers = {1, 2};
    cfg.res_blocks_per_level = 1;
    cfg.attention_levels = {1};
    cfg.time_embed_dim = 8;
    cfg.seed = 21;
    VelocityFieldModel model(cfg);
    Rng rng(22);
    for (Parameter* p : model.parameters())
        for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] += 0.1 * rng.normal();

    const auto path = (std::filesystem::temp_directory_path() / "fmchest_ckpt.bin").string();
    save_fm_checkpoint(model, 0.17, path);
    auto [loaded, meta] = load_fm_checkpoint(path);
    REQUIRE(meta.sigma_tilde == 0.17);
    REQUIRE(meta.network.base_channels == 4);
    REQUIRE(meta.network.level_multipliers == cfg.level_multipliers);

    auto p1 = model.parameters();
    auto p2 = loaded.parameters();
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) {
        REQUIRE(p1[i]->name == p2[i]->name);
        for (std::size_t j = 0; j < p1[i]->value.numel(); ++j)
            REQUIRE(p1[i]->value[j] == p2[i]->value[j]);
    }

    const RealTensor x = randn_real(rng, {2, 8, 8}, 1.0);
    const RealTensor ya = model.forward(x, 0.4);
    const RealTensor yb = loaded.forward(x, 0.4);
    for (std::size_t i = 0; i < ya.numel(); ++i) REQUIRE(ya[i] == yb[i]);

    // saving the loaded model reproduces the identical file
    const auto path2 = (std::filesystem::temp_directory_path() / "fmchest_ckpt2.bin").string();
    save_fm_checkpoint(loaded, meta.sigma_tilde, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string bytes1((std::istreambuf_iterator<char>(f1)), {});
    const std::string bytes2((std::istreambuf_iterator<char>(f2)), {});
    REQUIRE(bytes1 == bytes2);

    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("corrupt checkpoints produce format errors") {
    NetworkConfig cfg;
    cfg.base_channels = 4;
    cfg.level_multipliers = {1};
    cfg.res_blocks_per_level = 1;
    cfg.attention_levels = {};
    cfg.time_embed_dim = 8;
    VelocityFieldModel model(cfg);
    const auto path = (std::filesystem::temp_directory_path() / "fmchest_ckpt_bad.bin").string();
    save_fm_checkpoint(model, 0.1, path);

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    in.close();

    SECTION("bad magic") {
        std::string bad = bytes;
        bad[3] = 'Z';
        std::ofstream out(path, std::ios::binary);
        out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
        out.close();
        REQUIRE_THROWS_AS(load_fm_checkpoint(path), FormatError);
    }
    SECTION("truncated parameter data") {
        std::ofstream out(path, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
        out.close();
        try {
            load_fm_checkpoint(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(e.byte_offset > 0);
        }
    }
    std::filesystem::remove(path);
}
