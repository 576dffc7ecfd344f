#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fmchest/error.hpp"
#include "fmchest/rng.hpp"
#include "fmchest/tensor.hpp"

namespace fmchest {

/// Named trainable tensor with its gradient accumulator.
struct Parameter {
    std::string name;
    RealTensor value;
    RealTensor grad;

    Parameter() = default;
    Parameter(std::string n, std::vector<int> shape)
        : name(std::move(n)), value(shape), grad(std::move(shape)) {}
};

namespace nn {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// He-style normal init: std = scale * sqrt(2 / fan_in). scale 0 zero-inits.
inline void init_normal(Parameter& p, Rng& rng, int fan_in, double scale) {
    const double stddev = scale * std::sqrt(2.0 / fan_in);
    for (std::size_t i = 0; i < p.value.numel(); ++i)
        p.value[i] = stddev == 0.0 ? 0.0 : stddev * rng.normal();
}

// ---- Conv2d -----------------------------------------------------------------

/// 2-D convolution on a single [C, H, W] sample. kernel k x k, pad k/2,
/// stride 1 or 2. forward caches the input; backward accumulates dW/db and
/// returns dx.
struct Conv2d {
    int in_ch, out_ch, ksize, stride, pad;
    Parameter weight;  // [out_ch, in_ch, k, k]
    Parameter bias;    // [out_ch]
    RealTensor x_cache;

    Conv2d(const std::string& prefix, int in_c, int out_c, int k, int s, Rng& rng,
           double init_scale = 1.0)
        : in_ch(in_c),
          out_ch(out_c),
          ksize(k),
          stride(s),
          pad(k / 2),
          weight(prefix + ".weight", {out_c, in_c, k, k}),
          bias(prefix + ".bias", {out_c}) {
        init_normal(weight, rng, in_c * k * k, init_scale);
    }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }

    int out_extent(int in_extent) const { return (in_extent + 2 * pad - ksize) / stride + 1; }

    // valid output range [lo, hi) for one kernel offset so the inner loops
    // run branch-free: in = out * stride + k - pad must land in [0, extent)
    static void valid_range(int k, int pad, int stride, int in_extent, int out_extent, int& lo,
                            int& hi) {
        lo = std::max(0, (pad - k + stride - 1) / stride);
        hi = std::min(out_extent, (in_extent - 1 - k + pad) / stride + 1);
    }

    RealTensor forward(const RealTensor& x) {
        if (x.ndim() != 3 || x.dim(0) != in_ch)
            throw DimensionError("Conv2d " + weight.name + ": expected [" +
                                 std::to_string(in_ch) + ", H, W] input");
        x_cache = x;
        const int h = x.dim(1), w = x.dim(2);
        const int ho = out_extent(h), wo = out_extent(w);
        RealTensor y({out_ch, ho, wo});
        const double* xd = x.data();
        double* yd = y.data();
        const double* wd = weight.value.data();
        for (int oc = 0; oc < out_ch; ++oc) {
            double* yplane = yd + static_cast<std::size_t>(oc) * ho * wo;
            const double b = bias.value[static_cast<std::size_t>(oc)];
            for (int i = 0; i < ho * wo; ++i) yplane[i] = b;
            for (int ic = 0; ic < in_ch; ++ic) {
                const double* xplane = xd + static_cast<std::size_t>(ic) * h * w;
                const double* wk =
                    wd + (static_cast<std::size_t>(oc) * in_ch + ic) * ksize * ksize;
                for (int ky = 0; ky < ksize; ++ky) {
                    int oy_lo, oy_hi;
                    valid_range(ky, pad, stride, h, ho, oy_lo, oy_hi);
                    for (int kx = 0; kx < ksize; ++kx) {
                        const double wv = wk[ky * ksize + kx];
                        if (wv == 0.0) continue;
                        int ox_lo, ox_hi;
                        valid_range(kx, pad, stride, w, wo, ox_lo, ox_hi);
                        for (int oy = oy_lo; oy < oy_hi; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            const double* xrow =
                                xplane + static_cast<std::size_t>(iy) * w + kx - pad;
                            double* yrow = yplane + static_cast<std::size_t>(oy) * wo;
                            for (int ox = ox_lo; ox < ox_hi; ++ox)
                                yrow[ox] += wv * xrow[ox * stride];
                        }
                    }
                }
            }
        }
        return y;
    }

    RealTensor backward(const RealTensor& dy) {
        const int h = x_cache.dim(1), w = x_cache.dim(2);
        const int ho = dy.dim(1), wo = dy.dim(2);
        RealTensor dx({in_ch, h, w});
        const double* xd = x_cache.data();
        const double* dyd = dy.data();
        double* dxd = dx.data();
        const double* wd = weight.value.data();
        for (int oc = 0; oc < out_ch; ++oc) {
            const double* dyplane = dyd + static_cast<std::size_t>(oc) * ho * wo;
            double bacc = 0.0;
            for (int i = 0; i < ho * wo; ++i) bacc += dyplane[i];
            bias.grad[static_cast<std::size_t>(oc)] += bacc;
            for (int ic = 0; ic < in_ch; ++ic) {
                const double* xplane = xd + static_cast<std::size_t>(ic) * h * w;
                double* dxplane = dxd + static_cast<std::size_t>(ic) * h * w;
                const std::size_t wbase =
                    (static_cast<std::size_t>(oc) * in_ch + ic) * ksize * ksize;
                for (int ky = 0; ky < ksize; ++ky) {
                    int oy_lo, oy_hi;
                    valid_range(ky, pad, stride, h, ho, oy_lo, oy_hi);
                    for (int kx = 0; kx < ksize; ++kx) {
                        const double wv = wd[wbase + ky * ksize + kx];
                        int ox_lo, ox_hi;
                        valid_range(kx, pad, stride, w, wo, ox_lo, ox_hi);
                        double wacc = 0.0;
                        for (int oy = oy_lo; oy < oy_hi; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            const double* xrow =
                                xplane + static_cast<std::size_t>(iy) * w + kx - pad;
                            double* dxrow =
                                dxplane + static_cast<std::size_t>(iy) * w + kx - pad;
                            const double* dyrow = dyplane + static_cast<std::size_t>(oy) * wo;
                            for (int ox = ox_lo; ox < ox_hi; ++ox) {
                                wacc += dyrow[ox] * xrow[ox * stride];
                                dxrow[ox * stride] += wv * dyrow[ox];
                            }
                        }
                        weight.grad[wbase + ky * ksize + kx] += wacc;
                    }
                }
            }
        }
        return dx;
    }
};

// ---- GroupNorm ----------------------------------------------------------------

inline int groupnorm_groups(int channels) {
    for (int g : {8, 4, 2}) {
        if (channels % g == 0 && channels >= g) return g;
    }
    return 1;
}

/// Group normalization over [C, H, W] with per-channel scale and shift.
/// Statistics accumulate in 64-bit.
struct GroupNorm {
    int channels, groups;
    double eps = 1e-5;
    Parameter gamma, beta;
    RealTensor x_cache;
    std::vector<double> mean_, inv_std_;

    GroupNorm(const std::string& prefix, int c)
        : channels(c),
          groups(groupnorm_groups(c)),
          gamma(prefix + ".gamma", {c}),
          beta(prefix + ".beta", {c}) {
        gamma.value.fill(1.0);
    }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }

    RealTensor forward(const RealTensor& x) {
        x_cache = x;
        const int h = x.dim(1), w = x.dim(2);
        const int cpg = channels / groups;
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        const std::size_t group_n = static_cast<std::size_t>(cpg) * plane;
        mean_.assign(static_cast<std::size_t>(groups), 0.0);
        inv_std_.assign(static_cast<std::size_t>(groups), 0.0);
        RealTensor y = RealTensor::zeros_like(x);
        for (int g = 0; g < groups; ++g) {
            const double* xg = x.data() + static_cast<std::size_t>(g) * group_n;
            double mu = 0.0;
            for (std::size_t i = 0; i < group_n; ++i) mu += xg[i];
            mu /= static_cast<double>(group_n);
            double var = 0.0;
            for (std::size_t i = 0; i < group_n; ++i) {
                const double d = xg[i] - mu;
                var += d * d;
            }
            var /= static_cast<double>(group_n);
            const double istd = 1.0 / std::sqrt(var + eps);
            mean_[static_cast<std::size_t>(g)] = mu;
            inv_std_[static_cast<std::size_t>(g)] = istd;
            double* yg = y.data() + static_cast<std::size_t>(g) * group_n;
            for (int cc = 0; cc < cpg; ++cc) {
                const int c = g * cpg + cc;
                const double gm = gamma.value[static_cast<std::size_t>(c)];
                const double bt = beta.value[static_cast<std::size_t>(c)];
                for (std::size_t i = 0; i < plane; ++i) {
                    const std::size_t idx = static_cast<std::size_t>(cc) * plane + i;
                    yg[idx] = gm * (xg[idx] - mu) * istd + bt;
                }
            }
        }
        return y;
    }

    RealTensor backward(const RealTensor& dy) {
        const int h = x_cache.dim(1), w = x_cache.dim(2);
        const int cpg = channels / groups;
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        const std::size_t group_n = static_cast<std::size_t>(cpg) * plane;
        RealTensor dx = RealTensor::zeros_like(x_cache);
        for (int g = 0; g < groups; ++g) {
            const double* xg = x_cache.data() + static_cast<std::size_t>(g) * group_n;
            const double* dyg = dy.data() + static_cast<std::size_t>(g) * group_n;
            double* dxg = dx.data() + static_cast<std::size_t>(g) * group_n;
            const double mu = mean_[static_cast<std::size_t>(g)];
            const double istd = inv_std_[static_cast<std::size_t>(g)];
            double sum_gh = 0.0;    // sum of gamma-scaled upstream
            double sum_ghx = 0.0;   // sum of gamma-scaled upstream * normalized x
            for (int cc = 0; cc < cpg; ++cc) {
                const int c = g * cpg + cc;
                const double gm = gamma.value[static_cast<std::size_t>(c)];
                double dgamma = 0.0, dbeta = 0.0;
                for (std::size_t i = 0; i < plane; ++i) {
                    const std::size_t idx = static_cast<std::size_t>(cc) * plane + i;
                    const double xhat = (xg[idx] - mu) * istd;
                    const double gh = dyg[idx] * gm;
                    sum_gh += gh;
                    sum_ghx += gh * xhat;
                    dgamma += dyg[idx] * xhat;
                    dbeta += dyg[idx];
                }
                gamma.grad[static_cast<std::size_t>(c)] += dgamma;
                beta.grad[static_cast<std::size_t>(c)] += dbeta;
            }
            const double inv_n = 1.0 / static_cast<double>(group_n);
            for (int cc = 0; cc < cpg; ++cc) {
                const int c = g * cpg + cc;
                const double gm = gamma.value[static_cast<std::size_t>(c)];
                for (std::size_t i = 0; i < plane; ++i) {
                    const std::size_t idx = static_cast<std::size_t>(cc) * plane + i;
                    const double xhat = (xg[idx] - mu) * istd;
                    const double gh = dyg[idx] * gm;
                    dxg[idx] = istd * (gh - inv_n * (sum_gh + xhat * sum_ghx));
                }
            }
        }
        return dx;
    }
};

// ---- SiLU ---------------------------------------------------------------------

struct SiLU {
    RealTensor x_cache;

    RealTensor forward(const RealTensor& x) {
        x_cache = x;
        RealTensor y = RealTensor::zeros_like(x);
        for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] * sigmoid(x[i]);
        return y;
    }

    RealTensor backward(const RealTensor& dy) {
        RealTensor dx = RealTensor::zeros_like(x_cache);
        for (std::size_t i = 0; i < dx.numel(); ++i) {
            const double s = sigmoid(x_cache[i]);
            dx[i] = dy[i] * s * (1.0 + x_cache[i] * (1.0 - s));
        }
        return dx;
    }
};

// ---- Linear ---------------------------------------------------------------------

struct Linear {
    int in_dim, out_dim;
    Parameter weight;  // [out, in]
    Parameter bias;    // [out]
    RealTensor x_cache;

    Linear(const std::string& prefix, int in_d, int out_d, Rng& rng, double init_scale = 1.0)
        : in_dim(in_d),
          out_dim(out_d),
          weight(prefix + ".weight", {out_d, in_d}),
          bias(prefix + ".bias", {out_d}) {
        init_normal(weight, rng, in_d, init_scale);
    }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }

    RealTensor forward(const RealTensor& x) {
        if (static_cast<int>(x.numel()) != in_dim)
            throw DimensionError("Linear " + weight.name + ": expected " +
                                 std::to_string(in_dim) + " inputs");
        x_cache = x;
        RealTensor y({out_dim});
        for (int o = 0; o < out_dim; ++o) {
            double acc = bias.value[static_cast<std::size_t>(o)];
            const double* wrow = weight.value.data() + static_cast<std::size_t>(o) * in_dim;
            for (int i = 0; i < in_dim; ++i) acc += wrow[i] * x[static_cast<std::size_t>(i)];
            y[static_cast<std::size_t>(o)] = acc;
        }
        return y;
    }

    RealTensor backward(const RealTensor& dy) {
        RealTensor dx({in_dim});
        for (int o = 0; o < out_dim; ++o) {
            const double g = dy[static_cast<std::size_t>(o)];
            bias.grad[static_cast<std::size_t>(o)] += g;
            const double* wrow = weight.value.data() + static_cast<std::size_t>(o) * in_dim;
            double* dwrow = weight.grad.data() + static_cast<std::size_t>(o) * in_dim;
            for (int i = 0; i < in_dim; ++i) {
                dwrow[i] += g * x_cache[static_cast<std::size_t>(i)];
                dx[static_cast<std::size_t>(i)] += g * wrow[i];
            }
        }
        return dx;
    }
};

// ---- Upsample (nearest neighbor, factor 2) ------------------------------------

inline RealTensor upsample_nearest2x(const RealTensor& x) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    RealTensor y({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch) {
        const double* xp = x.data() + static_cast<std::size_t>(ch) * h * w;
        double* yp = y.data() + static_cast<std::size_t>(ch) * 4 * h * w;
        for (int iy = 0; iy < h; ++iy) {
            for (int ix = 0; ix < w; ++ix) {
                const double v = xp[static_cast<std::size_t>(iy) * w + ix];
                double* base = yp + static_cast<std::size_t>(2 * iy) * 2 * w + 2 * ix;
                base[0] = v;
                base[1] = v;
                base[2 * w] = v;
                base[2 * w + 1] = v;
            }
        }
    }
    return y;
}

inline RealTensor upsample_nearest2x_backward(const RealTensor& dy) {
    const int c = dy.dim(0), ho = dy.dim(1), wo = dy.dim(2);
    const int h = ho / 2, w = wo / 2;
    RealTensor dx({c, h, w});
    for (int ch = 0; ch < c; ++ch) {
        const double* dyp = dy.data() + static_cast<std::size_t>(ch) * ho * wo;
        double* dxp = dx.data() + static_cast<std::size_t>(ch) * h * w;
        for (int iy = 0; iy < h; ++iy) {
            for (int ix = 0; ix < w; ++ix) {
                const double* base = dyp + static_cast<std::size_t>(2 * iy) * wo + 2 * ix;
                dxp[static_cast<std::size_t>(iy) * w + ix] =
                    base[0] + base[1] + base[wo] + base[wo + 1];
            }
        }
    }
    return dx;
}

// ---- channel concat -------------------------------------------------------------

inline RealTensor concat_channels(const RealTensor& a, const RealTensor& b) {
    if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        throw DimensionError("concat_channels: spatial shapes differ");
    RealTensor y({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
    std::copy(a.data(), a.data() + a.numel(), y.data());
    std::copy(b.data(), b.data() + b.numel(), y.data() + a.numel());
    return y;
}

inline std::pair<RealTensor, RealTensor> split_channels(const RealTensor& dy, int c_first) {
    RealTensor da({c_first, dy.dim(1), dy.dim(2)});
    RealTensor db({dy.dim(0) - c_first, dy.dim(1), dy.dim(2)});
    std::copy(dy.data(), dy.data() + da.numel(), da.data());
    std::copy(dy.data() + da.numel(), dy.data() + dy.numel(), db.data());
    return {std::move(da), std::move(db)};
}

// ---- sinusoidal time embedding ---------------------------------------------------

/// Half sines, half cosines over geometrically spaced frequencies. t in [0,1]
/// is stretched by 1000 so the fastest component sweeps many periods.
inline RealTensor sinusoidal_embedding(double t, int dim) {
    if (dim < 2 || dim % 2 != 0)
        throw InvalidParameter("sinusoidal_embedding: dim must be even and >= 2");
    const int half = dim / 2;
    RealTensor e({dim});
    const double tau = 1000.0 * t;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        e[static_cast<std::size_t>(i)] = std::sin(tau * freq);
        e[static_cast<std::size_t>(half + i)] = std::cos(tau * freq);
    }
    return e;
}

/// Shared embedding trunk: sinusoidal -> Linear -> SiLU -> Linear.
struct TimeEmbedding {
    int dim;
    Linear lin1, lin2;
    SiLU act;

    TimeEmbedding(const std::string& prefix, int d, Rng& rng)
        : dim(d), lin1(prefix + ".lin1", d, d, rng), lin2(prefix + ".lin2", d, d, rng) {}

    void collect(std::vector<Parameter*>& out) {
        lin1.collect(out);
        lin2.collect(out);
    }

    RealTensor forward(double t) {
        return lin2.forward(act.forward(lin1.forward(sinusoidal_embedding(t, dim))));
    }

    void backward(const RealTensor& demb) { lin1.backward(act.backward(lin2.backward(demb))); }
};

// ---- residual block ----------------------------------------------------------------

/// Pre-activation residual block conditioned on the time embedding through a
/// learned per-channel scale and shift:
///   h = conv1(silu(gn1(x)))
///   (s, b) = proj(silu(emb));  h = gn2(h) * (1 + s) + b
///   y = conv2(silu(h)) + skip(x)
/// The multiplicative path lets blocks learn time-dependent gain, which the
/// flow target needs near t = 1.
struct ResBlock {
    int in_ch, out_ch;
    GroupNorm gn1;
    SiLU act1;
    Conv2d conv1;
    SiLU emb_act;
    Linear emb_proj;  // emb_dim -> 2*out_ch: scales then shifts
    GroupNorm gn2;
    SiLU act2;
    Conv2d conv2;
    std::optional<Conv2d> skip;
    RealTensor g_cache, sb_cache;

    ResBlock(const std::string& prefix, int in_c, int out_c, int emb_dim, Rng& rng)
        : in_ch(in_c),
          out_ch(out_c),
          gn1(prefix + ".gn1", in_c),
          conv1(prefix + ".conv1", in_c, out_c, 3, 1, rng),
          emb_proj(prefix + ".emb", emb_dim, 2 * out_c, rng),
          gn2(prefix + ".gn2", out_c),
          conv2(prefix + ".conv2", out_c, out_c, 3, 1, rng) {
        if (in_c != out_c) skip.emplace(prefix + ".skip", in_c, out_c, 1, 1, rng);
    }

    void collect(std::vector<Parameter*>& out) {
        gn1.collect(out);
        conv1.collect(out);
        emb_proj.collect(out);
        gn2.collect(out);
        conv2.collect(out);
        if (skip) skip->collect(out);
    }

    RealTensor forward(const RealTensor& x, const RealTensor& emb) {
        RealTensor h = conv1.forward(act1.forward(gn1.forward(x)));
        sb_cache = emb_proj.forward(emb_act.forward(emb));
        g_cache = gn2.forward(h);
        RealTensor mod = RealTensor::zeros_like(g_cache);
        const std::size_t plane = static_cast<std::size_t>(h.dim(1)) * h.dim(2);
        for (int c = 0; c < out_ch; ++c) {
            const double s = sb_cache[static_cast<std::size_t>(c)];
            const double b = sb_cache[static_cast<std::size_t>(out_ch + c)];
            const double* gp = g_cache.data() + static_cast<std::size_t>(c) * plane;
            double* mp = mod.data() + static_cast<std::size_t>(c) * plane;
            for (std::size_t i = 0; i < plane; ++i) mp[i] = gp[i] * (1.0 + s) + b;
        }
        RealTensor y = conv2.forward(act2.forward(mod));
        if (skip) {
            const RealTensor sx = skip->forward(x);
            for (std::size_t i = 0; i < y.numel(); ++i) y[i] += sx[i];
        } else {
            for (std::size_t i = 0; i < y.numel(); ++i) y[i] += x[i];
        }
        return y;
    }

    /// demb accumulates the gradient flowing into the shared embedding vector.
    RealTensor backward(const RealTensor& dy, RealTensor& demb) {
        const RealTensor dmod = act2.backward(conv2.backward(dy));
        const std::size_t plane = static_cast<std::size_t>(dmod.dim(1)) * dmod.dim(2);
        RealTensor dg = RealTensor::zeros_like(g_cache);
        RealTensor dsb({2 * out_ch});
        for (int c = 0; c < out_ch; ++c) {
            const double s = sb_cache[static_cast<std::size_t>(c)];
            const double* dmp = dmod.data() + static_cast<std::size_t>(c) * plane;
            const double* gp = g_cache.data() + static_cast<std::size_t>(c) * plane;
            double* dgp = dg.data() + static_cast<std::size_t>(c) * plane;
            double ds = 0.0, db = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
                dgp[i] = dmp[i] * (1.0 + s);
                ds += dmp[i] * gp[i];
                db += dmp[i];
            }
            dsb[static_cast<std::size_t>(c)] = ds;
            dsb[static_cast<std::size_t>(out_ch + c)] = db;
        }
        const RealTensor demb_local = emb_act.backward(emb_proj.backward(dsb));
        for (std::size_t i = 0; i < demb.numel(); ++i) demb[i] += demb_local[i];
        RealTensor dh = gn2.backward(dg);
        RealTensor dx = gn1.backward(act1.backward(conv1.backward(dh)));
        if (skip) {
            const RealTensor ds = skip->backward(dy);
            for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += ds[i];
        } else {
            for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dy[i];
        }
        return dx;
    }
};

// ---- self-attention block ------------------------------------------------------------

/// Single-head spatial self-attention with a residual connection:
///   y = x + Wo * attn(gn(x)) using 1x1 projections over H*W tokens.
struct AttentionBlock {
    int channels;
    GroupNorm norm;
    Conv2d to_q, to_k, to_v, to_out;
    RealTensor h_cache, q_cache, k_cache, v_cache, attn_cache;

    AttentionBlock(const std::string& prefix, int c, Rng& rng)
        : channels(c),
          norm(prefix + ".norm", c),
          to_q(prefix + ".q", c, c, 1, 1, rng),
          to_k(prefix + ".k", c, c, 1, 1, rng),
          to_v(prefix + ".v", c, c, 1, 1, rng),
          to_out(prefix + ".out", c, c, 1, 1, rng) {}

    void collect(std::vector<Parameter*>& out) {
        norm.collect(out);
        to_q.collect(out);
        to_k.collect(out);
        to_v.collect(out);
        to_out.collect(out);
    }

    RealTensor forward(const RealTensor& x) {
        const int t = x.dim(1) * x.dim(2);
        h_cache = norm.forward(x);
        q_cache = to_q.forward(h_cache);
        k_cache = to_k.forward(h_cache);
        v_cache = to_v.forward(h_cache);
        const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
        attn_cache = RealTensor({t, t});
        const double* q = q_cache.data();
        const double* k = k_cache.data();
        for (int i = 0; i < t; ++i) {
            double* row = attn_cache.data() + static_cast<std::size_t>(i) * t;
            double maxv = -1e300;
            for (int j = 0; j < t; ++j) {
                double s = 0.0;
                for (int c = 0; c < channels; ++c)
                    s += q[static_cast<std::size_t>(c) * t + i] * k[static_cast<std::size_t>(c) * t + j];
                row[j] = s * scale;
                maxv = std::max(maxv, row[j]);
            }
            double sum = 0.0;
            for (int j = 0; j < t; ++j) {
                row[j] = std::exp(row[j] - maxv);
                sum += row[j];
            }
            for (int j = 0; j < t; ++j) row[j] /= sum;
        }
        RealTensor att({channels, x.dim(1), x.dim(2)});
        const double* v = v_cache.data();
        for (int c = 0; c < channels; ++c) {
            double* ap = att.data() + static_cast<std::size_t>(c) * t;
            const double* vp = v + static_cast<std::size_t>(c) * t;
            for (int i = 0; i < t; ++i) {
                const double* row = attn_cache.data() + static_cast<std::size_t>(i) * t;
                double acc = 0.0;
                for (int j = 0; j < t; ++j) acc += row[j] * vp[j];
                ap[i] = acc;
            }
        }
        RealTensor y = to_out.forward(att);
        for (std::size_t i = 0; i < y.numel(); ++i) y[i] += x[i];
        return y;
    }

    RealTensor backward(const RealTensor& dy) {
        const int t = attn_cache.dim(0);
        const RealTensor datt = to_out.backward(dy);
        // gradients through att[c][i] = sum_j A[i][j] v[c][j]
        RealTensor dA({t, t});
        RealTensor dv = RealTensor::zeros_like(v_cache);
        const double* v = v_cache.data();
        for (int i = 0; i < t; ++i) {
            double* darow = dA.data() + static_cast<std::size_t>(i) * t;
            for (int j = 0; j < t; ++j) {
                double acc = 0.0;
                for (int c = 0; c < channels; ++c)
                    acc += datt[static_cast<std::size_t>(c) * t + i] * v[static_cast<std::size_t>(c) * t + j];
                darow[j] = acc;
            }
        }
        for (int c = 0; c < channels; ++c) {
            const double* dattp = datt.data() + static_cast<std::size_t>(c) * t;
            double* dvp = dv.data() + static_cast<std::size_t>(c) * t;
            for (int j = 0; j < t; ++j) {
                double acc = 0.0;
                for (int i = 0; i < t; ++i)
                    acc += attn_cache[static_cast<std::size_t>(i) * t + j] * dattp[i];
                dvp[j] = acc;
            }
        }
        // softmax rows: dS = A * (dA - rowdot(dA, A))
        RealTensor dS({t, t});
        for (int i = 0; i < t; ++i) {
            const double* arow = attn_cache.data() + static_cast<std::size_t>(i) * t;
            const double* darow = dA.data() + static_cast<std::size_t>(i) * t;
            double dot = 0.0;
            for (int j = 0; j < t; ++j) dot += arow[j] * darow[j];
            double* dsrow = dS.data() + static_cast<std::size_t>(i) * t;
            for (int j = 0; j < t; ++j) dsrow[j] = arow[j] * (darow[j] - dot);
        }
        const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
        RealTensor dq = RealTensor::zeros_like(q_cache);
        RealTensor dk = RealTensor::zeros_like(k_cache);
        const double* q = q_cache.data();
        const double* k = k_cache.data();
        for (int c = 0; c < channels; ++c) {
            const double* qp = q + static_cast<std::size_t>(c) * t;
            const double* kp = k + static_cast<std::size_t>(c) * t;
            double* dqp = dq.data() + static_cast<std::size_t>(c) * t;
            double* dkp = dk.data() + static_cast<std::size_t>(c) * t;
            for (int i = 0; i < t; ++i) {
                const double* dsrow = dS.data() + static_cast<std::size_t>(i) * t;
                double acc = 0.0;
                for (int j = 0; j < t; ++j) {
                    acc += dsrow[j] * kp[j];
                    dkp[j] += dsrow[j] * qp[i];
                }
                dqp[i] += acc * scale;
            }
        }
        for (std::size_t i = 0; i < dk.numel(); ++i) dk[i] *= scale;
        RealTensor dh = to_q.backward(dq);
        const RealTensor dhk = to_k.backward(dk);
        const RealTensor dhv = to_v.backward(dv);
        for (std::size_t i = 0; i < dh.numel(); ++i) dh[i] += dhk[i] + dhv[i];
        RealTensor dx = norm.backward(dh);
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dy[i];
        return dx;
    }
};

}  // namespace nn

// ---- the velocity-field network -----------------------------------------------------

struct NetworkConfig {
    int base_channels = 16;
    std::vector<int> level_multipliers = {1, 2, 2};
    int res_blocks_per_level = 2;
    std::set<int> attention_levels = {2};
    int time_embed_dim = 64;
    std::uint64_t seed = 0;

    int levels() const { return static_cast<int>(level_multipliers.size()); }

    void validate() const {
        if (level_multipliers.empty()) throw InvalidParameter("network config: need >= 1 level");
        if (base_channels < 1) throw InvalidParameter("network config: base_channels must be >= 1");
        if (res_blocks_per_level < 1)
            throw InvalidParameter("network config: res_blocks_per_level must be >= 1");
        if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
            throw InvalidParameter("network config: time_embed_dim must be even and >= 2");
        for (int m : level_multipliers)
            if (m < 1) throw InvalidParameter("network config: level multipliers must be >= 1");
        for (int a : attention_levels)
            if (a < 0 || a >= levels())
                throw InvalidParameter("network config: attention level out of range");
    }
};

/// u_theta(x, t): encoder-decoder convolutional network over [2, M, N]
/// tensors with residual blocks, optional bottleneck attention, sinusoidal
/// time conditioning, and a zero-initialized output head (the untrained
/// model predicts zero velocity).
class VelocityFieldModel {
public:
    explicit VelocityFieldModel(const NetworkConfig& cfg) : config_(cfg) {
        cfg.validate();
        Rng rng(cfg.seed);
        const int levels = cfg.levels();
        const int emb = cfg.time_embed_dim;
        std::vector<int> ch(static_cast<std::size_t>(levels));
        for (int i = 0; i < levels; ++i)
            ch[static_cast<std::size_t>(i)] = cfg.base_channels * cfg.level_multipliers[static_cast<std::size_t>(i)];

        time_embed_.emplace("time", emb, rng);
        stem_.emplace("stem", 2, ch[0], 3, 1, rng);
        int prev = ch[0];
        for (int i = 0; i < levels; ++i) {
            EncLevel lvl;
            const std::string p = "enc" + std::to_string(i);
            for (int r = 0; r < cfg.res_blocks_per_level; ++r) {
                const int in_c = (r == 0) ? prev : ch[static_cast<std::size_t>(i)];
                lvl.res.emplace_back(p + ".res" + std::to_string(r), in_c,
                                     ch[static_cast<std::size_t>(i)], emb, rng);
            }
            if (cfg.attention_levels.count(i))
                lvl.attn.emplace(p + ".attn", ch[static_cast<std::size_t>(i)], rng);
            if (i < levels - 1)
                lvl.down.emplace(p + ".down", ch[static_cast<std::size_t>(i)],
                                 ch[static_cast<std::size_t>(i)], 3, 2, rng);
            enc_.push_back(std::move(lvl));
            prev = ch[static_cast<std::size_t>(i)];
        }
        for (int i = levels - 2; i >= 0; --i) {
            DecLevel lvl;
            lvl.level = i;
            const std::string p = "dec" + std::to_string(i);
            const int c_deep = ch[static_cast<std::size_t>(i + 1)];
            const int c_here = ch[static_cast<std::size_t>(i)];
            lvl.up_conv.emplace(p + ".up", c_deep, c_deep, 3, 1, rng);
            for (int r = 0; r < cfg.res_blocks_per_level; ++r) {
                const int in_c = (r == 0) ? c_deep + c_here : c_here;
                lvl.res.emplace_back(p + ".res" + std::to_string(r), in_c, c_here, emb, rng);
            }
            if (cfg.attention_levels.count(i)) lvl.attn.emplace(p + ".attn", c_here, rng);
            dec_.push_back(std::move(lvl));
        }
        head_norm_.emplace("head.norm", ch[0]);
        head_conv_.emplace("head.conv", ch[0], 2, 3, 1, rng, /*init_scale=*/0.0);
    }

    const NetworkConfig& config() const { return config_; }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        time_embed_->collect(out);
        stem_->collect(out);
        for (auto& lvl : enc_) {
            for (auto& r : lvl.res) r.collect(out);
            if (lvl.attn) lvl.attn->collect(out);
            if (lvl.down) lvl.down->collect(out);
        }
        for (auto& lvl : dec_) {
            lvl.up_conv->collect(out);
            for (auto& r : lvl.res) r.collect(out);
            if (lvl.attn) lvl.attn->collect(out);
        }
        head_norm_->collect(out);
        head_conv_->collect(out);
        return out;
    }

    std::size_t param_count() {
        std::size_t n = 0;
        for (const Parameter* p : parameters()) n += p->value.numel();
        return n;
    }

    void zero_grad() {
        for (Parameter* p : parameters()) p->grad.fill(0.0);
    }

    /// Spatial dims must be divisible by 2^(levels-1).
    void check_input(const RealTensor& x) const {
        if (x.ndim() != 3 || x.dim(0) != 2)
            throw DimensionError("forward: expected [2, M, N] input");
        const int down = 1 << (config_.levels() - 1);
        if (x.dim(1) % down != 0 || x.dim(2) % down != 0 || x.dim(1) < down || x.dim(2) < down)
            throw DimensionError("forward: spatial dims must be divisible by 2^(levels-1)");
    }

    RealTensor forward(const RealTensor& x, double t) {
        check_input(x);
        ++eval_count;
        emb_cache_ = time_embed_->forward(t);
        RealTensor h = stem_->forward(x);
        skips_.clear();
        for (auto& lvl : enc_) {
            for (auto& r : lvl.res) h = r.forward(h, emb_cache_);
            if (lvl.attn) h = lvl.attn->forward(h);
            if (lvl.down) {
                skips_.push_back(h);
                h = lvl.down->forward(h);
            }
        }
        for (auto& lvl : dec_) {
            h = lvl.up_conv->forward(nn::upsample_nearest2x(h));
            lvl.up_channels = h.dim(0);
            h = nn::concat_channels(h, skips_.back());
            skips_.pop_back();
            for (auto& r : lvl.res) h = r.forward(h, emb_cache_);
            if (lvl.attn) h = lvl.attn->forward(h);
        }
        h = head_conv_->forward(head_act_.forward(head_norm_->forward(h)));
        forward_ran_ = true;
        return h;
    }

    /// Accumulates parameter gradients for the most recent forward call.
    void backward(const RealTensor& dy) {
        if (!forward_ran_) throw std::logic_error("backward called before forward");
        RealTensor demb({config_.time_embed_dim});
        RealTensor d = head_norm_->backward(head_act_.backward(head_conv_->backward(dy)));
        std::vector<RealTensor> skip_grads;
        for (auto it = dec_.rbegin(); it != dec_.rend(); ++it) {
            if (it->attn) d = it->attn->backward(d);
            for (auto r = it->res.rbegin(); r != it->res.rend(); ++r) d = r->backward(d, demb);
            auto [d_up, d_skip] = nn::split_channels(d, it->up_channels);
            skip_grads.push_back(std::move(d_skip));
            d = nn::upsample_nearest2x_backward(it->up_conv->backward(d_up));
        }
        for (auto it = enc_.rbegin(); it != enc_.rend(); ++it) {
            if (it->down) {
                d = it->down->backward(d);
                const RealTensor& ds = skip_grads.back();
                for (std::size_t i = 0; i < d.numel(); ++i) d[i] += ds[i];
                skip_grads.pop_back();
            }
            if (it->attn) d = it->attn->backward(d);
            for (auto r = it->res.rbegin(); r != it->res.rend(); ++r) d = r->backward(d, demb);
        }
        stem_->backward(d);
        time_embed_->backward(demb);
        forward_ran_ = false;
    }

    long long eval_count = 0;

private:
    struct EncLevel {
        std::vector<nn::ResBlock> res;
        std::optional<nn::AttentionBlock> attn;
        std::optional<nn::Conv2d> down;
    };
    struct DecLevel {
        int level = 0;
        std::optional<nn::Conv2d> up_conv;
        std::vector<nn::ResBlock> res;
        std::optional<nn::AttentionBlock> attn;
        int up_channels = 0;
    };

    NetworkConfig config_;
    std::optional<nn::TimeEmbedding> time_embed_;
    std::optional<nn::Conv2d> stem_;
    std::vector<EncLevel> enc_;
    std::vector<DecLevel> dec_;
    std::optional<nn::GroupNorm> head_norm_;
    nn::SiLU head_act_;
    std::optional<nn::Conv2d> head_conv_;

    RealTensor emb_cache_;
    std::vector<RealTensor> skips_;
    bool forward_ran_ = false;
};

}  // namespace fmchest
