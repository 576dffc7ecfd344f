// fmchest: dataset generation, model training, channel estimation, and
// NMSE/timing benchmark sweeps from the command line.
//
// Exit codes: 0 success, 1 configuration error (bad flags, bad experiment
// config, missing files), 2 runtime error (training divergence, corrupt
// files, I/O failures).

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fmchest/fmchest.hpp"

namespace {

using namespace fmchest;

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::istringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
    return out;
}

NetworkConfig network_from_flags(int base_channels, const std::string& multipliers,
                                 int res_blocks, const std::string& attention, int time_dim,
                                 std::uint64_t seed) {
    NetworkConfig cfg;
    cfg.base_channels = base_channels;
    cfg.level_multipliers = parse_int_list(multipliers);
    cfg.res_blocks_per_level = res_blocks;
    cfg.attention_levels.clear();
    if (attention == "none") {
        // no attention blocks
    } else if (attention == "bottleneck") {
        cfg.attention_levels.insert(static_cast<int>(cfg.level_multipliers.size()) - 1);
    } else {
        for (int a : parse_int_list(attention)) cfg.attention_levels.insert(a);
    }
    cfg.time_embed_dim = time_dim;
    cfg.seed = seed;
    cfg.validate();
    return cfg;
}

EstimatorSpec estimator_from_json(const nlohmann::json& j) {
    EstimatorSpec est;
    const std::string type = j.at("type").get<std::string>();
    if (type == "ls") {
        est.type = EstimatorSpec::Type::ls;
    } else if (type == "fm") {
        est.type = EstimatorSpec::Type::fm;
        est.model_path = j.at("model").get<std::string>();
        est.steps = j.value("steps", 5);
        if (j.value("update_rule", "standard") == std::string("paper-literal"))
            est.update_rule = UpdateRule::paper_literal;
    } else if (type == "sm") {
        est.type = EstimatorSpec::Type::sm;
        est.model_path = j.at("model").get<std::string>();
        est.k = j.value("k", 500);
        est.l = j.value("l", 3);
        est.eps0 = j.value("eps0", 2e-5);
    } else {
        throw ConfigError("unknown estimator type \"" + type + "\"");
    }
    return est;
}

ExperimentSpec experiment_from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open experiment config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid experiment JSON: ") + e.what());
    }
    ExperimentSpec spec;
    try {
        spec.dataset_path = j.at("dataset").get<std::string>();
        for (const auto& je : j.at("estimators")) spec.estimators.push_back(estimator_from_json(je));
        spec.snr_db = j.at("snr_db").get<std::vector<double>>();
        spec.trials = j.value("trials", 100);
        spec.seed = j.value("seed", 0ULL);
        if (j.contains("pilots")) {
            spec.pilots.t_slots = j["pilots"].value("t", 0);
            spec.pilots.power = j["pilots"].value("power", 1.0);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid experiment config: ") + e.what());
    }
    return spec;
}

void print_report(const BenchReport& report) {
    std::printf("%-10s %8s %8s %10s %12s %12s %10s\n", "estimator", "snr_db", "steps", "nmse_db",
                "stderr_db", "wall_s", "evals");
    for (const BenchRow& r : report.rows) {
        std::printf("%-10s %8.2f %8s %10.3f %12.4f %12.4f %10lld\n", r.estimator.c_str(),
                    r.snr_db, r.steps.c_str(), r.nmse_db, r.nmse_stderr_db, r.wall_s, r.evals);
    }
    if (!report.environment.empty()) std::printf("# %s\n", report.environment.c_str());
}

int run(int argc, char** argv) {
    CLI::App app{"flow-matching generative channel estimation benchmark"};
    app.require_subcommand(1);

    // generate-data ------------------------------------------------------------
    auto* gen = app.add_subcommand("generate-data", "generate a synthetic channel dataset");
    int g_m = 16, g_n = 64, g_train = 1000, g_val = 100, g_test = 100;
    int g_clusters = 3, g_rays = 10;
    double g_spread = 5.0, g_spacing = 0.5;
    std::uint64_t g_seed = 1;
    std::string g_out;
    gen->add_option("--m", g_m, "receive antennas");
    gen->add_option("--n", g_n, "transmit antennas");
    gen->add_option("--train", g_train, "training samples");
    gen->add_option("--val", g_val, "validation samples");
    gen->add_option("--test", g_test, "test samples");
    gen->add_option("--clusters", g_clusters, "scatterer clusters");
    gen->add_option("--rays", g_rays, "rays per cluster");
    gen->add_option("--spread", g_spread, "angular spread (degrees)");
    gen->add_option("--spacing", g_spacing, "antenna spacing (wavelengths)");
    gen->add_option("--seed", g_seed, "generator seed");
    gen->add_option("--out", g_out, "output dataset path (FMCHEST1)")->required();

    // shared training flags ------------------------------------------------------
    const auto add_train_flags = [](CLI::App* cmd, std::string& data, std::string& out,
                                    int& epochs, int& batch, double& lr, double& wd,
                                    std::uint64_t& seed, std::string& log, int& base,
                                    std::string& mult, int& res, std::string& attn,
                                    int& time_dim, int& ckpt_every) {
        cmd->add_option("--data", data, "dataset path")->required();
        cmd->add_option("--out", out, "checkpoint output path")->required();
        cmd->add_option("--epochs", epochs, "training epochs");
        cmd->add_option("--batch", batch, "batch size");
        cmd->add_option("--lr", lr, "AdamW learning rate");
        cmd->add_option("--wd", wd, "AdamW weight decay");
        cmd->add_option("--seed", seed, "training seed");
        cmd->add_option("--log", log, "per-epoch CSV log path");
        cmd->add_option("--base-channels", base, "network base channel count");
        cmd->add_option("--multipliers", mult, "per-level channel multipliers, e.g. 1,2,2");
        cmd->add_option("--res-blocks", res, "residual blocks per level");
        cmd->add_option("--attention", attn, "attention levels: none, bottleneck, or list");
        cmd->add_option("--time-dim", time_dim, "time embedding dimension");
        cmd->add_option("--ckpt-every", ckpt_every, "checkpoint cadence in epochs (0: end only)");
    };

    // train-fm -------------------------------------------------------------------
    auto* tfm = app.add_subcommand("train-fm", "train the flow-matching velocity field");
    std::string tfm_data, tfm_out, tfm_log;
    int tfm_epochs = 30, tfm_batch = 32, tfm_res = 2, tfm_base = 16, tfm_time = 64,
        tfm_ckpt_every = 0;
    double tfm_lr = 1e-4, tfm_wd = 1e-2, tfm_sigma = 0.1, tfm_sigma_min = 0.0;
    std::uint64_t tfm_seed = 0;
    std::string tfm_mult = "1,2,2", tfm_attn = "bottleneck";
    add_train_flags(tfm, tfm_data, tfm_out, tfm_epochs, tfm_batch, tfm_lr, tfm_wd, tfm_seed,
                    tfm_log, tfm_base, tfm_mult, tfm_res, tfm_attn, tfm_time, tfm_ckpt_every);
    tfm->add_option("--sigma-tilde", tfm_sigma, "training corruption level");
    tfm->add_option("--sigma-min", tfm_sigma_min, "path width at t=1");

    // train-sm -------------------------------------------------------------------
    auto* tsm = app.add_subcommand("train-sm", "train the score-matching baseline");
    std::string tsm_data, tsm_out, tsm_log;
    int tsm_epochs = 30, tsm_batch = 32, tsm_res = 2, tsm_base = 16, tsm_time = 64,
        tsm_ckpt_every = 0;
    double tsm_lr = 1e-4, tsm_wd = 1e-2, tsm_sigma_max = 1.0, tsm_sigma_min = 0.01;
    std::uint64_t tsm_seed = 0;
    std::string tsm_mult = "1,2,2", tsm_attn = "bottleneck";
    add_train_flags(tsm, tsm_data, tsm_out, tsm_epochs, tsm_batch, tsm_lr, tsm_wd, tsm_seed,
                    tsm_log, tsm_base, tsm_mult, tsm_res, tsm_attn, tsm_time, tsm_ckpt_every);
    tsm->add_option("--sigma-max", tsm_sigma_max, "noise ladder top");
    tsm->add_option("--sigma-min", tsm_sigma_min, "noise ladder bottom");

    // estimate -------------------------------------------------------------------
    auto* est = app.add_subcommand("estimate", "estimate channels from a test split");
    std::string e_model, e_data, e_traj, e_rule = "standard";
    double e_snr = 10.0, e_power = 1.0, e_eps0 = 2e-5;
    int e_steps = 5, e_trials = 0, e_pilot_t = 0, e_k = 500, e_l = 3;
    bool e_sm = false;
    std::uint64_t e_seed = 0;
    est->add_option("--model", e_model, "checkpoint path (FMCKPT01 or SMCKPT01)")->required();
    est->add_option("--data", e_data, "dataset path")->required();
    est->add_option("--snr", e_snr, "SNR in dB");
    est->add_option("--steps", e_steps, "Euler steps (fm)");
    est->add_option("--update-rule", e_rule, "standard or paper-literal");
    est->add_flag("--sm", e_sm, "treat the checkpoint as a score model");
    est->add_option("--k", e_k, "Langevin noise levels (sm)");
    est->add_option("--l", e_l, "Langevin updates per level (sm)");
    est->add_option("--eps0", e_eps0, "Langevin base step size (sm)");
    est->add_option("--trials", e_trials, "trials (0: one pass over the test split)");
    est->add_option("--pilot-t", e_pilot_t, "pilot slots (0: square pilots)");
    est->add_option("--pilot-power", e_power, "pilot power E_p");
    est->add_option("--seed", e_seed, "noise seed");
    est->add_option("--trajectory", e_traj, "write per-step NMSE CSV for the first trial (fm)");

    // sweep ----------------------------------------------------------------------
    auto* sw = app.add_subcommand("sweep", "run an experiment config and emit a CSV report");
    std::string sw_config, sw_out;
    std::uint64_t sw_seed = 0;
    bool sw_seed_set = false;
    sw->add_option("--config", sw_config, "experiment JSON path")->required();
    sw->add_option("--out", sw_out, "output CSV path")->required();
    sw->add_option("--seed", sw_seed, "override the config seed")->each([&](const std::string&) {
        sw_seed_set = true;
    });

    // timing ---------------------------------------------------------------------
    auto* tm = app.add_subcommand("timing", "sampling-time comparison at one SNR");
    std::string tm_data, tm_fm_model, tm_sm_model, tm_fm_steps = "1,5,20,100", tm_sm_kl = "500,3",
                tm_out;
    double tm_snr = 10.0, tm_power = 1.0, tm_eps0 = 2e-5;
    int tm_trials = 500, tm_pilot_t = 0;
    std::uint64_t tm_seed = 0;
    tm->add_option("--data", tm_data, "dataset path")->required();
    tm->add_option("--fm-model", tm_fm_model, "flow checkpoint");
    tm->add_option("--sm-model", tm_sm_model, "score checkpoint");
    tm->add_option("--fm-steps", tm_fm_steps, "comma list of Euler step counts");
    tm->add_option("--sm-kl", tm_sm_kl, "K,L for the Langevin baseline");
    tm->add_option("--eps0", tm_eps0, "Langevin base step size");
    tm->add_option("--snr", tm_snr, "SNR in dB");
    tm->add_option("--trials", tm_trials, "estimates per method");
    tm->add_option("--pilot-t", tm_pilot_t, "pilot slots (0: square pilots)");
    tm->add_option("--pilot-power", tm_power, "pilot power E_p");
    tm->add_option("--seed", tm_seed, "noise seed");
    tm->add_option("--out", tm_out, "optional CSV output path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints usage or help text
        return code == 0 ? 0 : 1;
    }

    if (gen->parsed()) {
        ChannelModelConfig cfg;
        cfg.m_rx = g_m;
        cfg.n_tx = g_n;
        cfg.n_clusters = g_clusters;
        cfg.rays_per_cluster = g_rays;
        cfg.angular_spread_deg = g_spread;
        cfg.antenna_spacing = g_spacing;
        cfg.seed = g_seed;
        const ChannelDataset data = build_dataset(cfg, {g_train, g_val, g_test});
        save_dataset(data, g_out);
        std::printf("wrote %d train / %d val / %d test samples (%dx%d) to %s\n", g_train, g_val,
                    g_test, g_m, g_n, g_out.c_str());
        return 0;
    }

    if (tfm->parsed()) {
        const ChannelDataset data = load_dataset(tfm_data);
        const NetworkConfig net = network_from_flags(tfm_base, tfm_mult, tfm_res, tfm_attn,
                                                     tfm_time, tfm_seed);
        TrainConfig cfg;
        cfg.epochs = tfm_epochs;
        cfg.batch_size = tfm_batch;
        cfg.flow.sigma_tilde = tfm_sigma;
        cfg.flow.sigma_min = tfm_sigma_min;
        cfg.optimizer.lr = tfm_lr;
        cfg.optimizer.weight_decay = tfm_wd;
        cfg.seed = tfm_seed;
        cfg.log_path = tfm_log;
        cfg.checkpoint_path = tfm_out;
        cfg.checkpoint_every = tfm_ckpt_every;
        const TrainResult result = train_fm(data, net, cfg);
        std::printf("best validation loss %.6f at epoch %d; checkpoint: %s\n",
                    result.best_val_loss, result.best_epoch, tfm_out.c_str());
        return 0;
    }

    if (tsm->parsed()) {
        const ChannelDataset data = load_dataset(tsm_data);
        const NetworkConfig net = network_from_flags(tsm_base, tsm_mult, tsm_res, tsm_attn,
                                                     tsm_time, tsm_seed);
        NoiseLadderConfig ladder;
        ladder.sigma_max = tsm_sigma_max;
        ladder.sigma_min = tsm_sigma_min;
        TrainConfig cfg;
        cfg.epochs = tsm_epochs;
        cfg.batch_size = tsm_batch;
        cfg.optimizer.lr = tsm_lr;
        cfg.optimizer.weight_decay = tsm_wd;
        cfg.seed = tsm_seed;
        cfg.log_path = tsm_log;
        DsmTrainResult result = dsm_train(data, net, ladder, cfg);
        save_sm_checkpoint(result.model, tsm_out);
        std::printf("best validation loss %.6f at epoch %d; checkpoint: %s\n",
                    result.best_val_loss, result.best_epoch, tsm_out.c_str());
        return 0;
    }

    if (est->parsed()) {
        ExperimentSpec spec;
        spec.dataset_path = e_data;
        EstimatorSpec e;
        if (e_sm) {
            e.type = EstimatorSpec::Type::sm;
            e.k = e_k;
            e.l = e_l;
            e.eps0 = e_eps0;
        } else {
            e.type = EstimatorSpec::Type::fm;
            e.steps = e_steps;
            if (e_rule == "paper-literal") e.update_rule = UpdateRule::paper_literal;
        }
        e.model_path = e_model;
        spec.estimators = {e};
        spec.snr_db = {e_snr};
        spec.pilots.t_slots = e_pilot_t;
        spec.pilots.power = e_power;
        spec.seed = e_seed;
        if (e_trials <= 0) {
            const ChannelDataset data = load_dataset(e_data);
            spec.trials = data.sizes.test;
        } else {
            spec.trials = e_trials;
        }
        const BenchReport report = run_sweep(spec);
        print_report(report);

        if (!e_traj.empty() && !e_sm) {
            const ChannelDataset data = load_dataset(e_data);
            auto [model, meta] = load_fm_checkpoint(e_model);
            PilotConfig pcfg;
            pcfg.n_tx = data.config.n_tx;
            pcfg.t_slots = e_pilot_t > 0 ? e_pilot_t : data.config.n_tx;
            pcfg.pilot_power = e_power;
            pcfg.seed = e_seed;
            const ComplexMatrix pilots = make_pilots(pcfg);
            Rng rng = Rng(e_seed).child(12345);
            const ComplexMatrix& h = data.test(0);
            const Measurement meas =
                measure(h, pilots, snr_to_sigma(e_snr, e_power), rng);
            SamplerConfig scfg;
            scfg.steps = e_steps;
            scfg.record_trajectory = true;
            if (e_rule == "paper-literal") scfg.update_rule = UpdateRule::paper_literal;
            std::vector<ComplexMatrix> trajectory;
            estimate_channel(model, meas, e_power, scfg, &trajectory);
            std::ofstream traj_out(e_traj);
            if (!traj_out) throw IoError("cannot open " + e_traj);
            traj_out << "step,nmse_db\n";
            for (std::size_t s = 0; s < trajectory.size(); ++s)
                traj_out << s << ',' << nmse_db(trajectory[s], h) << '\n';
            std::printf("trajectory written to %s\n", e_traj.c_str());
        }
        return 0;
    }

    if (sw->parsed()) {
        ExperimentSpec spec = experiment_from_json_file(sw_config);
        if (sw_seed_set) spec.seed = sw_seed;
        const BenchReport report = run_sweep(spec);
        emit_csv(report, sw_out);
        print_report(report);
        std::printf("report written to %s\n", sw_out.c_str());
        return 0;
    }

    if (tm->parsed()) {
        ExperimentSpec spec;
        spec.dataset_path = tm_data;
        if (!tm_fm_model.empty()) {
            for (int s : parse_int_list(tm_fm_steps)) {
                EstimatorSpec e;
                e.type = EstimatorSpec::Type::fm;
                e.model_path = tm_fm_model;
                e.steps = s;
                spec.estimators.push_back(e);
            }
        }
        if (!tm_sm_model.empty()) {
            const std::vector<int> kl = parse_int_list(tm_sm_kl);
            if (kl.size() != 2) throw ConfigError("--sm-kl expects K,L");
            EstimatorSpec e;
            e.type = EstimatorSpec::Type::sm;
            e.model_path = tm_sm_model;
            e.k = kl[0];
            e.l = kl[1];
            e.eps0 = tm_eps0;
            spec.estimators.push_back(e);
        }
        if (spec.estimators.empty())
            throw ConfigError("timing: need --fm-model and/or --sm-model");
        spec.snr_db = {tm_snr};
        spec.trials = tm_trials;
        spec.pilots.t_slots = tm_pilot_t;
        spec.pilots.power = tm_power;
        spec.seed = tm_seed;
        const BenchReport report = run_sweep(spec);
        print_report(report);
        if (!tm_out.empty()) {
            emit_csv(report, tm_out);
            std::printf("report written to %s\n", tm_out.c_str());
        }
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const fmchest::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const fmchest::InvalidParameter& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const fmchest::DimensionError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
