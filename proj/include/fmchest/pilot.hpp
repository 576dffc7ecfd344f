#pragma once

#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

#include "fmchest/error.hpp"
#include "fmchest/rng.hpp"
#include "fmchest/tensor.hpp"

namespace fmchest {

struct PilotConfig {
    int n_tx = 64;
    int t_slots = 75;
    double pilot_power = 1.0;  // E_p, so that P P^H = E_p I_N
    std::uint64_t seed = 0;

    void validate() const {
        if (n_tx < 1 || t_slots < 1) throw InvalidParameter("pilot config: dimensions must be >= 1");
        if (t_slots < n_tx)
            throw InvalidParameter("pilot config: t_slots must be >= n_tx for orthogonal pilots");
        if (!(pilot_power > 0.0) || !std::isfinite(pilot_power))
            throw InvalidParameter("pilot config: pilot_power must be finite and > 0");
    }
};

struct Measurement {
    ComplexMatrix y;       // M x T received samples
    ComplexMatrix pilots;  // N x T pilot matrix
    double noise_sigma = 0.0;
};

namespace detail {

inline bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

/// T x T orthogonal design with entries restricted to the four QPSK phases,
/// built from Kronecker factors of the 4-point DFT (entries 1,-j,-1,j) and,
/// for an odd power of two, one 2-point DFT (entries +/-1). Phases are
/// accumulated as integers mod 4, so entries and row inner products are exact.
inline std::vector<std::vector<int>> qpsk_phase_design(int t) {
    std::vector<std::vector<int>> phases{{0}};
    int size = 1;
    auto kron = [&](const std::vector<std::vector<int>>& factor) {
        const int f = static_cast<int>(factor.size());
        std::vector<std::vector<int>> next(static_cast<std::size_t>(size * f),
                                           std::vector<int>(static_cast<std::size_t>(size * f)));
        for (int r = 0; r < size * f; ++r)
            for (int c = 0; c < size * f; ++c)
                next[r][c] = (factor[r / size][c / size] + phases[r % size][c % size]) % 4;
        phases = std::move(next);
        size *= f;
    };
    // 4-point DFT phase table: entry (k, t) has phase (k*t mod 4) quarter-turns of -j.
    std::vector<std::vector<int>> f4(4, std::vector<int>(4));
    for (int k = 0; k < 4; ++k)
        for (int c = 0; c < 4; ++c) f4[k][c] = (k * c) % 4;
    const std::vector<std::vector<int>> f2{{0, 0}, {0, 2}};
    int rem = t;
    while (rem % 4 == 0) {
        kron(f4);
        rem /= 4;
    }
    if (rem % 2 == 0) {
        kron(f2);
        rem /= 2;
    }
    return phases;
}

}  // namespace detail

/// Relative orthogonality residual ||P P^H - E_p I||_F / E_p.
inline double pilot_orthogonality_residual(const ComplexMatrix& pilots, double pilot_power) {
    const ComplexMatrix gram = matmul(pilots, hermitian(pilots));
    double acc = 0.0;
    for (int i = 0; i < gram.rows(); ++i) {
        for (int j = 0; j < gram.cols(); ++j) {
            const cplx expected = (i == j) ? cplx(pilot_power, 0.0) : cplx(0.0, 0.0);
            acc += std::norm(gram(i, j) - expected);
        }
    }
    return std::sqrt(acc) / pilot_power;
}

/// N x T pilot matrix with P P^H = E_p I_N.
///
/// For T a power of two the rows come from an exact QPSK-phase orthogonal
/// design; otherwise DFT rows (unit modulus, general phases) are used, since
/// no QPSK-phase design exists for such T. The seed only selects a random
/// subset/permutation of rows and a global QPSK rotation, so orthogonality
/// is deterministic by construction.
inline ComplexMatrix make_pilots(const PilotConfig& cfg) {
    cfg.validate();
    const int n = cfg.n_tx;
    const int t = cfg.t_slots;
    Rng rng(cfg.seed);

    // Fisher-Yates over row indices; the first n entries pick the rows.
    std::vector<int> rows(static_cast<std::size_t>(t));
    std::iota(rows.begin(), rows.end(), 0);
    for (int i = t - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.uniform() * (i + 1));
        std::swap(rows[static_cast<std::size_t>(i)], rows[static_cast<std::size_t>(j)]);
    }
    const int global_phase = static_cast<int>(rng.uniform() * 4.0);

    const double amp = std::sqrt(cfg.pilot_power / t);
    ComplexMatrix p(n, t);
    if (detail::is_power_of_two(t)) {
        // Global e^{j pi/4} rotation lands the entries on the QPSK constellation.
        const auto phases = detail::qpsk_phase_design(t);
        for (int k = 0; k < n; ++k) {
            const auto& row = phases[static_cast<std::size_t>(rows[static_cast<std::size_t>(k)])];
            for (int c = 0; c < t; ++c) {
                const int q = (row[static_cast<std::size_t>(c)] + global_phase) % 4;
                p(k, c) = std::polar(amp, std::numbers::pi / 4 - q * std::numbers::pi / 2);
            }
        }
    } else {
        for (int k = 0; k < n; ++k) {
            const int row = rows[static_cast<std::size_t>(k)];
            for (int c = 0; c < t; ++c) {
                const double angle = -2.0 * std::numbers::pi * row * c / t -
                                     global_phase * std::numbers::pi / 2;
                p(k, c) = std::polar(amp, angle);
            }
        }
    }
    return p;
}

/// Forward measurement: Y = H P + E with E entries CN(0, noise_sigma^2).
inline Measurement measure(const ComplexMatrix& h, const ComplexMatrix& pilots, double noise_sigma,
                           Rng& rng) {
    if (h.cols() != pilots.rows())
        throw DimensionError("measure: channel cols must equal pilot rows");
    Measurement meas;
    meas.pilots = pilots;
    meas.noise_sigma = noise_sigma;
    meas.y = matmul(h, pilots);
    if (noise_sigma > 0.0) {
        const ComplexMatrix e = randn_complex(rng, meas.y.rows(), meas.y.cols(), noise_sigma);
        meas.y = add(meas.y, e);
    } else if (!(noise_sigma == 0.0)) {
        throw InvalidParameter("measure: noise_sigma must be finite and >= 0");
    }
    return meas;
}

/// Least-squares estimate (1/E_p) Y P^H, which equals H + E P^H / E_p when
/// the pilots are orthogonal. Per-entry LS error variance is sigma^2 / E_p.
inline ComplexMatrix ls_estimate(const Measurement& meas, double pilot_power) {
    if (!(pilot_power > 0.0)) throw InvalidParameter("ls_estimate: pilot_power must be > 0");
    const double residual = pilot_orthogonality_residual(meas.pilots, pilot_power);
    if (residual > 1e-6)
        throw InvalidParameter("ls_estimate: pilots are not orthogonal (residual " +
                               std::to_string(residual) + ")");
    return scale(matmul(meas.y, hermitian(meas.pilots)), 1.0 / pilot_power);
}

/// Noise level for a target per-entry receive SNR under the unit per-entry
/// channel power convention: SNR = E_p E|h|^2 / sigma^2 with E|h|^2 = 1.
inline double snr_to_sigma(double snr_db, double pilot_power) {
    return std::sqrt(pilot_power / std::pow(10.0, snr_db / 10.0));
}

}  // namespace fmchest
