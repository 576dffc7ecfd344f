#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fmchest/error.hpp"
#include "fmchest/nn.hpp"

namespace fmchest {

inline void to_json(nlohmann::json& j, const NetworkConfig& cfg) {
    j = nlohmann::json{{"base_channels", cfg.base_channels},
                       {"level_multipliers", cfg.level_multipliers},
                       {"res_blocks_per_level", cfg.res_blocks_per_level},
                       {"attention_levels", std::vector<int>(cfg.attention_levels.begin(),
                                                             cfg.attention_levels.end())},
                       {"time_embed_dim", cfg.time_embed_dim},
                       {"seed", cfg.seed}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& cfg) {
    j.at("base_channels").get_to(cfg.base_channels);
    j.at("level_multipliers").get_to(cfg.level_multipliers);
    j.at("res_blocks_per_level").get_to(cfg.res_blocks_per_level);
    std::vector<int> attn;
    j.at("attention_levels").get_to(attn);
    cfg.attention_levels = std::set<int>(attn.begin(), attn.end());
    j.at("time_embed_dim").get_to(cfg.time_embed_dim);
    j.at("seed").get_to(cfg.seed);
}

// ---- checkpoint files -----------------------------------------------------------
//
// Layout (little-endian):
//   [0..7]  magic ("FMCKPT01" for flow models, "SMCKPT01" for score models)
//   u32     metadata JSON length, then the JSON bytes
//   u32     parameter count
//   per parameter, in declaration order:
//     u16 name length, name bytes
//     u8  rank, u32 dims[rank]
//     f64 data (row-major)

namespace detail {

inline void write_checkpoint(const std::string& path, const char* magic,
                             const nlohmann::json& meta, std::vector<Parameter*> params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open " + path + " for writing");
    out.write(magic, 8);
    const std::string meta_str = meta.dump();
    const auto meta_len = static_cast<std::uint32_t>(meta_str.size());
    out.write(reinterpret_cast<const char*>(&meta_len), 4);
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    const auto n_params = static_cast<std::uint32_t>(params.size());
    out.write(reinterpret_cast<const char*>(&n_params), 4);
    for (const Parameter* p : params) {
        const auto name_len = static_cast<std::uint16_t>(p->name.size());
        out.write(reinterpret_cast<const char*>(&name_len), 2);
        out.write(p->name.data(), name_len);
        const auto rank = static_cast<std::uint8_t>(p->value.ndim());
        out.write(reinterpret_cast<const char*>(&rank), 1);
        for (int d = 0; d < p->value.ndim(); ++d) {
            const auto dim = static_cast<std::uint32_t>(p->value.dim(d));
            out.write(reinterpret_cast<const char*>(&dim), 4);
        }
        out.write(reinterpret_cast<const char*>(p->value.data()),
                  static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
    }
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

struct CheckpointReader {
    std::ifstream in;
    std::size_t offset = 0;

    explicit CheckpointReader(const std::string& path) : in(path, std::ios::binary) {
        if (!in) throw IoError("load_checkpoint: cannot open " + path);
    }

    void read_raw(void* dst, std::size_t n, const char* what) {
        in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n)
            throw FormatError(std::string("load_checkpoint: truncated ") + what,
                              offset + static_cast<std::size_t>(in.gcount()));
        offset += n;
    }

    template <typename T>
    T read_scalar(const char* what) {
        T v;
        read_raw(&v, sizeof(T), what);
        return v;
    }
};

inline nlohmann::json read_checkpoint_meta(CheckpointReader& r, const char* expected_magic) {
    char magic[8];
    r.read_raw(magic, 8, "magic");
    if (std::memcmp(magic, expected_magic, 8) != 0)
        throw FormatError(std::string("load_checkpoint: bad magic, expected \"") +
                              expected_magic + "\"",
                          0);
    const auto meta_len = r.read_scalar<std::uint32_t>("metadata length");
    std::string meta_str(meta_len, '\0');
    r.read_raw(meta_str.data(), meta_len, "metadata");
    try {
        return nlohmann::json::parse(meta_str);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("load_checkpoint: invalid metadata JSON: ") + e.what(), 12);
    }
}

inline void read_checkpoint_params(CheckpointReader& r, const std::vector<Parameter*>& params) {
    const auto n_params = r.read_scalar<std::uint32_t>("parameter count");
    if (n_params != params.size())
        throw FormatError("load_checkpoint: parameter count mismatch (file has " +
                              std::to_string(n_params) + ", model has " +
                              std::to_string(params.size()) + ")",
                          r.offset - 4);
    for (Parameter* p : params) {
        const auto name_len = r.read_scalar<std::uint16_t>("parameter name length");
        std::string name(name_len, '\0');
        r.read_raw(name.data(), name_len, "parameter name");
        if (name != p->name)
            throw FormatError("load_checkpoint: parameter name mismatch, expected " + p->name +
                                  " got " + name,
                              r.offset - name_len);
        const auto rank = r.read_scalar<std::uint8_t>("parameter rank");
        if (rank != p->value.ndim())
            throw FormatError("load_checkpoint: rank mismatch for " + name, r.offset - 1);
        for (int d = 0; d < p->value.ndim(); ++d) {
            const auto dim = r.read_scalar<std::uint32_t>("parameter dim");
            if (static_cast<int>(dim) != p->value.dim(d))
                throw FormatError("load_checkpoint: shape mismatch for " + name, r.offset - 4);
        }
        r.read_raw(p->value.data(), p->value.numel() * sizeof(double), "parameter data");
        if (!p->value.is_finite())
            throw FormatError("load_checkpoint: non-finite values in " + name, r.offset);
    }
}

}  // namespace detail

// ---- flow-matching checkpoints (FMCKPT01) ----------------------------------------

struct FlowCheckpointMeta {
    NetworkConfig network;
    double sigma_tilde = 0.1;  // corruption level the model was trained at
};

inline void save_fm_checkpoint(VelocityFieldModel& model, double sigma_tilde,
                               const std::string& path) {
    nlohmann::json meta;
    meta["network"] = model.config();
    meta["sigma_tilde"] = sigma_tilde;
    detail::write_checkpoint(path, "FMCKPT01", meta, model.parameters());
}

/// Rebuilds the network from the stored config and fills its parameters.
inline std::pair<VelocityFieldModel, FlowCheckpointMeta> load_fm_checkpoint(
    const std::string& path) {
    detail::CheckpointReader r(path);
    const nlohmann::json meta = detail::read_checkpoint_meta(r, "FMCKPT01");
    FlowCheckpointMeta info;
    info.network = meta.at("network").get<NetworkConfig>();
    info.sigma_tilde = meta.at("sigma_tilde").get<double>();
    VelocityFieldModel model(info.network);
    detail::read_checkpoint_params(r, model.parameters());
    return {std::move(model), info};
}

}  // namespace fmchest
