#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "fmchest/error.hpp"
#include "fmchest/rng.hpp"
#include "fmchest/tensor.hpp"

namespace fmchest {

/// Geometric clustered channel model: a desk-scale stand-in for 3GPP CDL
/// tables. Channels are sums of rank-1 ray contributions with clustered
/// angles, which gives them the low-dimensional spatial structure the
/// estimators exploit.
struct ChannelModelConfig {
    int m_rx = 16;
    int n_tx = 64;
    int n_clusters = 3;
    int rays_per_cluster = 10;
    double angular_spread_deg = 5.0;
    double antenna_spacing = 0.5;  // element spacing in wavelengths
    std::uint64_t seed = 1;

    void validate() const {
        if (m_rx < 1 || n_tx < 1) throw InvalidParameter("channel config: antenna counts must be >= 1");
        if (n_clusters < 1 || rays_per_cluster < 1)
            throw InvalidParameter("channel config: cluster/ray counts must be >= 1");
        if (angular_spread_deg < 0.0) throw InvalidParameter("channel config: angular spread must be >= 0");
    }
};

/// ULA response: entry k = exp(j 2 pi spacing k sin(angle)), k = 0..n_ant-1.
inline ComplexMatrix steering_vector(int n_ant, double angle_rad, double spacing) {
    if (n_ant < 1) throw InvalidParameter("steering_vector: n_ant must be >= 1");
    ComplexMatrix v(n_ant, 1);
    const double phase_step = 2.0 * std::numbers::pi * spacing * std::sin(angle_rad);
    for (int k = 0; k < n_ant; ++k) v(k, 0) = std::polar(1.0, phase_step * k);
    return v;
}

/// One channel realization H = c * sum over clusters and rays of
/// alpha * a_rx(theta) a_tx(phi)^H, with alpha ~ CN(0,1), cluster mean angles
/// uniform over (-pi/2, pi/2), per-ray Gaussian angle offsets, and
/// c = 1/sqrt(total rays) so that E||H||_F^2 = M*N (unit per-entry power).
inline ComplexMatrix generate_channel(const ChannelModelConfig& cfg, Rng& rng) {
    cfg.validate();
    const double spread_rad = cfg.angular_spread_deg * std::numbers::pi / 180.0;
    ComplexMatrix h(cfg.m_rx, cfg.n_tx);
    for (int c = 0; c < cfg.n_clusters; ++c) {
        const double mean_aoa = rng.uniform(-std::numbers::pi / 2, std::numbers::pi / 2);
        const double mean_aod = rng.uniform(-std::numbers::pi / 2, std::numbers::pi / 2);
        for (int r = 0; r < cfg.rays_per_cluster; ++r) {
            const double aoa = mean_aoa + spread_rad * rng.normal();
            const double aod = mean_aod + spread_rad * rng.normal();
            const cplx alpha(rng.normal() / std::sqrt(2.0), rng.normal() / std::sqrt(2.0));
            const ComplexMatrix a_rx = steering_vector(cfg.m_rx, aoa, cfg.antenna_spacing);
            const ComplexMatrix a_tx = steering_vector(cfg.n_tx, aod, cfg.antenna_spacing);
            for (int m = 0; m < cfg.m_rx; ++m) {
                const cplx am = alpha * a_rx(m, 0);
                for (int n = 0; n < cfg.n_tx; ++n) h(m, n) += am * std::conj(a_tx(n, 0));
            }
        }
    }
    const double norm = 1.0 / std::sqrt(static_cast<double>(cfg.n_clusters) * cfg.rays_per_cluster);
    return scale(h, norm);
}

struct SplitSizes {
    int train = 0;
    int val = 0;
    int test = 0;
    int total() const { return train + val + test; }
};

/// Persisted collection of true channel realizations plus generator metadata.
/// Samples are normalized to exact unit per-entry power (||H||_F^2 = M*N) at
/// construction, which keeps NMSE ratios free of channel-norm spread, and are
/// quantized to float32 components so that the in-memory dataset and the
/// on-disk FMCHEST1 payload are bit-identical.
struct ChannelDataset {
    ChannelModelConfig config;
    SplitSizes sizes;
    std::string prng_id = Rng::kAlgorithmId;
    std::vector<ComplexMatrix> samples;  // train || val || test

    const ComplexMatrix& train(int i) const { return samples[static_cast<std::size_t>(i)]; }
    const ComplexMatrix& val(int i) const {
        return samples[static_cast<std::size_t>(sizes.train + i)];
    }
    const ComplexMatrix& test(int i) const {
        return samples[static_cast<std::size_t>(sizes.train + sizes.val + i)];
    }
};

namespace detail {

inline ComplexMatrix quantize_f32(const ComplexMatrix& h) {
    ComplexMatrix out = h;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] = cplx(static_cast<double>(static_cast<float>(h.data()[i].real())),
                             static_cast<double>(static_cast<float>(h.data()[i].imag())));
    }
    return out;
}

}  // namespace detail

/// Draw train/val/test splits from disjoint per-sample child streams of the
/// config seed, so datasets are reproducible and parallelizable per sample.
inline ChannelDataset build_dataset(const ChannelModelConfig& cfg, const SplitSizes& sizes) {
    cfg.validate();
    if (sizes.train < 1 || sizes.val < 1 || sizes.test < 1)
        throw InvalidParameter("build_dataset: each split must have >= 1 sample");
    ChannelDataset ds;
    ds.config = cfg;
    ds.sizes = sizes;
    Rng root(cfg.seed);
    ds.samples.reserve(static_cast<std::size_t>(sizes.total()));
    for (int i = 0; i < sizes.total(); ++i) {
        Rng sample_rng = root.child(static_cast<std::uint64_t>(i));
        ComplexMatrix h = generate_channel(cfg, sample_rng);
        const double power = frobenius_norm_sq(h);
        if (power > 0.0)
            h = scale(h, std::sqrt(static_cast<double>(cfg.m_rx) * cfg.n_tx / power));
        ds.samples.push_back(detail::quantize_f32(h));
    }
    return ds;
}

// ---- FMCHEST1 binary format --------------------------------------------------
//
// Fixed 64-byte little-endian header:
//   [ 0..7 ]  magic "FMCHEST1"
//   [ 8..11]  u32 version (1)
//   [12..15]  u32 m_rx
//   [16..19]  u32 n_tx
//   [20..23]  u32 n_train
//   [24..27]  u32 n_val
//   [28..31]  u32 n_test
//   [32..35]  u32 dtype code (0 = interleaved re/im float32)
//   [36..43]  i64 generator seed
//   [44..45]  u16 n_clusters
//   [46..47]  u16 rays_per_cluster
//   [48..51]  f32 angular_spread_deg
//   [52..55]  f32 antenna_spacing
//   [56..63]  char[8] PRNG id, zero-padded
// Payload: samples in train||val||test order, each M*N row-major,
// each entry as (float32 re, float32 im).

namespace detail {

inline constexpr char kDatasetMagic[8] = {'F', 'M', 'C', 'H', 'E', 'S', 'T', '1'};
inline constexpr std::uint32_t kDatasetVersion = 1;

template <typename T>
void put(std::vector<char>& buf, std::size_t offset, T value) {
    std::memcpy(buf.data() + offset, &value, sizeof(T));
}

template <typename T>
T get(const std::vector<char>& buf, std::size_t offset) {
    T value;
    std::memcpy(&value, buf.data() + offset, sizeof(T));
    return value;
}

}  // namespace detail

inline void save_dataset(const ChannelDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_dataset: cannot open " + path + " for writing");

    std::vector<char> header(64, 0);
    std::memcpy(header.data(), detail::kDatasetMagic, 8);
    detail::put<std::uint32_t>(header, 8, detail::kDatasetVersion);
    detail::put<std::uint32_t>(header, 12, static_cast<std::uint32_t>(ds.config.m_rx));
    detail::put<std::uint32_t>(header, 16, static_cast<std::uint32_t>(ds.config.n_tx));
    detail::put<std::uint32_t>(header, 20, static_cast<std::uint32_t>(ds.sizes.train));
    detail::put<std::uint32_t>(header, 24, static_cast<std::uint32_t>(ds.sizes.val));
    detail::put<std::uint32_t>(header, 28, static_cast<std::uint32_t>(ds.sizes.test));
    detail::put<std::uint32_t>(header, 32, 0);
    detail::put<std::int64_t>(header, 36, static_cast<std::int64_t>(ds.config.seed));
    detail::put<std::uint16_t>(header, 44, static_cast<std::uint16_t>(ds.config.n_clusters));
    detail::put<std::uint16_t>(header, 46, static_cast<std::uint16_t>(ds.config.rays_per_cluster));
    detail::put<float>(header, 48, static_cast<float>(ds.config.angular_spread_deg));
    detail::put<float>(header, 52, static_cast<float>(ds.config.antenna_spacing));
    std::memcpy(header.data() + 56, ds.prng_id.data(), std::min<std::size_t>(8, ds.prng_id.size()));
    out.write(header.data(), 64);

    std::vector<float> buf;
    buf.reserve(2 * static_cast<std::size_t>(ds.config.m_rx) * ds.config.n_tx);
    for (const ComplexMatrix& h : ds.samples) {
        buf.clear();
        for (std::size_t i = 0; i < h.size(); ++i) {
            buf.push_back(static_cast<float>(h.data()[i].real()));
            buf.push_back(static_cast<float>(h.data()[i].imag()));
        }
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw IoError("save_dataset: write failed for " + path);
}

inline ChannelDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_dataset: cannot open " + path);

    std::vector<char> header(64);
    in.read(header.data(), 64);
    if (in.gcount() != 64)
        throw FormatError("load_dataset: truncated header", static_cast<std::size_t>(in.gcount()));
    if (std::memcmp(header.data(), detail::kDatasetMagic, 8) != 0)
        throw FormatError("load_dataset: bad magic, expected \"FMCHEST1\"", 0);
    const auto version = detail::get<std::uint32_t>(header, 8);
    if (version != detail::kDatasetVersion)
        throw FormatError("load_dataset: unsupported version " + std::to_string(version), 8);
    const auto dtype = detail::get<std::uint32_t>(header, 32);
    if (dtype != 0) throw FormatError("load_dataset: unknown dtype code " + std::to_string(dtype), 32);

    ChannelDataset ds;
    ds.config.m_rx = static_cast<int>(detail::get<std::uint32_t>(header, 12));
    ds.config.n_tx = static_cast<int>(detail::get<std::uint32_t>(header, 16));
    ds.sizes.train = static_cast<int>(detail::get<std::uint32_t>(header, 20));
    ds.sizes.val = static_cast<int>(detail::get<std::uint32_t>(header, 24));
    ds.sizes.test = static_cast<int>(detail::get<std::uint32_t>(header, 28));
    ds.config.seed = static_cast<std::uint64_t>(detail::get<std::int64_t>(header, 36));
    ds.config.n_clusters = detail::get<std::uint16_t>(header, 44);
    ds.config.rays_per_cluster = detail::get<std::uint16_t>(header, 46);
    ds.config.angular_spread_deg = detail::get<float>(header, 48);
    ds.config.antenna_spacing = detail::get<float>(header, 52);
    ds.prng_id.assign(header.data() + 56, header.data() + 64);
    ds.prng_id.erase(ds.prng_id.find_last_not_of('\0') + 1);

    if (ds.config.m_rx < 1 || ds.config.n_tx < 1)
        throw FormatError("load_dataset: invalid antenna counts", 12);
    if (ds.sizes.train < 0 || ds.sizes.val < 0 || ds.sizes.test < 0)
        throw FormatError("load_dataset: invalid split sizes", 20);

    const std::size_t per_sample = 2 * static_cast<std::size_t>(ds.config.m_rx) * ds.config.n_tx;
    std::vector<float> buf(per_sample);
    ds.samples.reserve(static_cast<std::size_t>(ds.sizes.total()));
    for (int s = 0; s < ds.sizes.total(); ++s) {
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(per_sample * sizeof(float)));
        if (static_cast<std::size_t>(in.gcount()) != per_sample * sizeof(float)) {
            const std::size_t offset =
                64 + static_cast<std::size_t>(s) * per_sample * sizeof(float) +
                static_cast<std::size_t>(in.gcount());
            throw FormatError("load_dataset: truncated sample payload", offset);
        }
        ComplexMatrix h(ds.config.m_rx, ds.config.n_tx);
        for (std::size_t i = 0; i < h.size(); ++i)
            h.data()[i] = cplx(static_cast<double>(buf[2 * i]), static_cast<double>(buf[2 * i + 1]));
        if (!h.is_finite())
            throw FormatError("load_dataset: non-finite sample entries",
                              64 + static_cast<std::size_t>(s) * per_sample * sizeof(float));
        ds.samples.push_back(std::move(h));
    }
    return ds;
}

}  // namespace fmchest
