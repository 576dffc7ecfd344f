#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fmchest/channel.hpp"
#include "fmchest/checkpoint.hpp"
#include "fmchest/error.hpp"
#include "fmchest/pilot.hpp"
#include "fmchest/sampler.hpp"
#include "fmchest/score.hpp"

namespace fmchest {

/// 10 log10(||H_est - H1||_F^2 / ||H1||_F^2), clamped at -300 dB so perfect
/// estimates stay numeric in reports.
inline double nmse_db(const ComplexMatrix& h_est, const ComplexMatrix& h_true) {
    if (!h_est.same_shape(h_true)) throw DimensionError("nmse_db: shape mismatch");
    const double den = frobenius_norm_sq(h_true);
    if (!(den > 0.0)) throw InvalidParameter("nmse_db: zero-norm reference channel");
    const double ratio = frobenius_norm_sq(sub(h_est, h_true)) / den;
    if (ratio < 1e-30) return -300.0;
    return 10.0 * std::log10(ratio);
}

struct PilotSpec {
    int t_slots = 0;      // 0: use the dataset's transmit antenna count
    double power = 1.0;   // E_p
};

struct EstimatorSpec {
    enum class Type { ls, fm, sm };
    Type type = Type::ls;
    std::string model_path;  // fm / sm checkpoints
    int steps = 5;           // fm Euler steps
    UpdateRule update_rule = UpdateRule::standard_euler;
    int k = 500;             // sm noise levels
    int l = 3;               // sm updates per level
    double eps0 = 2e-5;      // sm base step size

    std::string name() const {
        switch (type) {
            case Type::ls: return "ls";
            case Type::fm: return "fm";
            case Type::sm: return "sm";
        }
        return "?";
    }

    std::string steps_label() const {
        switch (type) {
            case Type::ls: return "-";
            case Type::fm: return std::to_string(steps);
            case Type::sm: return std::to_string(k) + "x" + std::to_string(l);
        }
        return "?";
    }
};

struct ExperimentSpec {
    std::string dataset_path;
    std::vector<EstimatorSpec> estimators;
    std::vector<double> snr_db;
    int trials = 100;
    PilotSpec pilots;
    std::uint64_t seed = 0;

    void validate() const {
        if (dataset_path.empty()) throw ConfigError("experiment: dataset path is empty");
        if (estimators.empty()) throw ConfigError("experiment: no estimators requested");
        if (snr_db.empty()) throw ConfigError("experiment: empty SNR grid");
        if (trials < 1) throw ConfigError("experiment: trials must be >= 1");
    }
};

struct BenchRow {
    std::string estimator;
    double snr_db;
    std::string steps;
    double nmse_db;
    double nmse_stderr_db;
    double wall_s;
    long long evals;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::string environment;
};

namespace detail {

struct LoadedEstimator {
    EstimatorSpec spec;
    std::optional<VelocityFieldModel> fm;
    std::optional<ScoreModel> sm;
};

inline LoadedEstimator load_estimator(const EstimatorSpec& spec, const ChannelDataset& data) {
    LoadedEstimator out;
    out.spec = spec;
    if (spec.type == EstimatorSpec::Type::fm) {
        if (spec.model_path.empty()) throw ConfigError("fm estimator: missing model path");
        std::ifstream probe(spec.model_path);
        if (!probe) throw ConfigError("fm estimator: checkpoint not found: " + spec.model_path);
        probe.close();
        auto [model, meta] = load_fm_checkpoint(spec.model_path);
        const int down = 1 << (meta.network.levels() - 1);
        if (data.config.m_rx % down != 0 || data.config.n_tx % down != 0)
            throw ConfigError("fm estimator: model depth incompatible with dataset shape");
        out.fm.emplace(std::move(model));
    } else if (spec.type == EstimatorSpec::Type::sm) {
        if (spec.model_path.empty()) throw ConfigError("sm estimator: missing model path");
        std::ifstream probe(spec.model_path);
        if (!probe) throw ConfigError("sm estimator: checkpoint not found: " + spec.model_path);
        probe.close();
        out.sm.emplace(load_sm_checkpoint(spec.model_path));
        const int down = 1 << (out.sm->net.config().levels() - 1);
        if (data.config.m_rx % down != 0 || data.config.n_tx % down != 0)
            throw ConfigError("sm estimator: model depth incompatible with dataset shape");
    }
    return out;
}

}  // namespace detail

/// Full benchmark sweep: for every (estimator, SNR) grid point, run `trials`
/// estimates over cycled test-split channels with fresh measurement noise per
/// trial, aggregate NMSE as 10 log10 of the trial-mean error ratio, and record
/// wall-clock totals (3 warm-up estimates excluded) plus exact
/// network-evaluation counts. Deterministic given the spec seed, apart from
/// the timing column.
inline BenchReport run_sweep(const ExperimentSpec& spec) {
    spec.validate();
    const ChannelDataset data = load_dataset(spec.dataset_path);
    if (data.sizes.test < 1) throw ConfigError("run_sweep: dataset has no test split");

    PilotConfig pcfg;
    pcfg.n_tx = data.config.n_tx;
    pcfg.t_slots = spec.pilots.t_slots > 0 ? spec.pilots.t_slots : data.config.n_tx;
    pcfg.pilot_power = spec.pilots.power;
    pcfg.seed = spec.seed;
    const ComplexMatrix pilots = make_pilots(pcfg);

    std::vector<detail::LoadedEstimator> loaded;
    for (const EstimatorSpec& est : spec.estimators)
        loaded.push_back(detail::load_estimator(est, data));

    BenchReport report;
    {
        std::ostringstream env;
        env << "dataset=" << spec.dataset_path << ";m=" << data.config.m_rx
            << ";n=" << data.config.n_tx << ";pilot_t=" << pcfg.t_slots
            << ";pilot_power=" << pcfg.pilot_power << ";trials=" << spec.trials
            << ";seed=" << spec.seed << ";threads=1";
        report.environment = env.str();
    }

    Rng root(spec.seed);
    for (std::size_t ei = 0; ei < loaded.size(); ++ei) {
        detail::LoadedEstimator& est = loaded[ei];
        for (std::size_t si = 0; si < spec.snr_db.size(); ++si) {
            const double snr = spec.snr_db[si];
            const double sigma = snr_to_sigma(snr, pcfg.pilot_power);
            // seeds depend on (snr, trial) but not the estimator, so every
            // estimator sees identical channels and noise: comparisons
            // between estimators are paired
            const auto trial_rng = [&](int trial) {
                const std::uint64_t idx =
                    static_cast<std::uint64_t>(si) * 1000003ULL +
                    static_cast<std::uint64_t>(trial);
                return root.child(idx);
            };

            const auto estimate_one = [&](int trial, Rng& rng) {
                const ComplexMatrix& h = data.test(trial % data.sizes.test);
                const Measurement meas = measure(h, pilots, sigma, rng);
                ComplexMatrix out;
                switch (est.spec.type) {
                    case EstimatorSpec::Type::ls:
                        out = ls_estimate(meas, pcfg.pilot_power);
                        break;
                    case EstimatorSpec::Type::fm: {
                        SamplerConfig scfg;
                        scfg.steps = est.spec.steps;
                        scfg.update_rule = est.spec.update_rule;
                        out = estimate_channel(*est.fm, meas, pcfg.pilot_power, scfg);
                        break;
                    }
                    case EstimatorSpec::Type::sm: {
                        LangevinConfig lcfg;
                        lcfg.n_levels = est.spec.k;
                        lcfg.steps_per_level = est.spec.l;
                        lcfg.sigma_max = est.sm->ladder.sigma_max;
                        lcfg.sigma_min = est.sm->ladder.sigma_min;
                        lcfg.eps0 = est.spec.eps0;
                        const ComplexMatrix init = ls_estimate(meas, pcfg.pilot_power);
                        out = annealed_langevin(*est.sm, init, lcfg, rng);
                        break;
                    }
                }
                return std::pair<ComplexMatrix, const ComplexMatrix*>(std::move(out), &h);
            };

            // warm-up estimates: excluded from the timing totals
            for (int w = 0; w < 3; ++w) {
                Rng rng = trial_rng(-3 + w);
                estimate_one(w, rng);
            }

            long long evals_before = 0;
            if (est.fm) evals_before = est.fm->eval_count;
            if (est.sm) evals_before = est.sm->net.eval_count;

            double sum_ratio = 0.0, sum_ratio_sq = 0.0;
            double wall = 0.0;
            for (int trial = 0; trial < spec.trials; ++trial) {
                Rng rng = trial_rng(trial);
                const auto t0 = std::chrono::steady_clock::now();
                const auto [out, h] = estimate_one(trial, rng);
                wall += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                            .count();
                const double ratio =
                    frobenius_norm_sq(sub(out, *h)) / frobenius_norm_sq(*h);
                sum_ratio += ratio;
                sum_ratio_sq += ratio * ratio;
            }
            long long evals_after = 0;
            if (est.fm) evals_after = est.fm->eval_count;
            if (est.sm) evals_after = est.sm->net.eval_count;

            const double mean_ratio = sum_ratio / spec.trials;
            const double var_ratio =
                std::max(0.0, sum_ratio_sq / spec.trials - mean_ratio * mean_ratio);
            const double se_ratio = std::sqrt(var_ratio / spec.trials);

            BenchRow row;
            row.estimator = est.spec.name();
            row.snr_db = snr;
            row.steps = est.spec.steps_label();
            row.nmse_db = mean_ratio < 1e-30 ? -300.0 : 10.0 * std::log10(mean_ratio);
            row.nmse_stderr_db =
                mean_ratio > 0.0 ? 10.0 / std::log(10.0) * se_ratio / mean_ratio : 0.0;
            row.wall_s = wall;
            row.evals = evals_after - evals_before;
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

// ---- CSV emission -------------------------------------------------------------

inline constexpr const char* kBenchCsvHeader =
    "estimator,snr_db,steps,nmse_db,nmse_stderr_db,wall_s,evals";

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

/// One header row, fixed column order, full-precision doubles. The
/// environment string rides along as a trailing comment line.
inline void emit_csv(const BenchReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("emit_csv: cannot open " + path + " for writing");
    out << kBenchCsvHeader << '\n';
    for (const BenchRow& r : report.rows) {
        out << r.estimator << ',' << detail::format_double(r.snr_db) << ',' << r.steps << ','
            << detail::format_double(r.nmse_db) << ',' << detail::format_double(r.nmse_stderr_db)
            << ',' << detail::format_double(r.wall_s) << ',' << r.evals << '\n';
    }
    if (!report.environment.empty()) out << "# " << report.environment << '\n';
    if (!out) throw IoError("emit_csv: write failed for " + path);
}

inline BenchReport parse_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("parse_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("parse_csv: empty file", 0);
    if (line != kBenchCsvHeader)
        throw FormatError("parse_csv: unexpected header \"" + line + "\"", 0);
    BenchReport report;
    std::size_t offset = line.size() + 1;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            report.environment = line.size() > 2 ? line.substr(2) : "";
            continue;
        }
        std::istringstream ss(line);
        std::string field;
        BenchRow row;
        auto next = [&]() {
            if (!std::getline(ss, field, ','))
                throw FormatError("parse_csv: short row", offset);
            return field;
        };
        row.estimator = next();
        row.snr_db = std::stod(next());
        row.steps = next();
        row.nmse_db = std::stod(next());
        row.nmse_stderr_db = std::stod(next());
        row.wall_s = std::stod(next());
        row.evals = std::stoll(next());
        report.rows.push_back(std::move(row));
        offset += line.size() + 1;
    }
    return report;
}

}  // namespace fmchest
