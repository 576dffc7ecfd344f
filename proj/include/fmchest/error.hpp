#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fmchest {

/// Bad argument value (negative sigma, odd embedding dim, t outside [0,1], ...).
struct InvalidParameter : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Operand shapes do not conform.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Corrupt or unreadable on-disk data. Carries the byte offset where parsing failed.
struct FormatError : std::runtime_error {
    std::size_t byte_offset;
    FormatError(const std::string& msg, std::size_t offset)
        : std::runtime_error(msg + " (at byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Training diverged (non-finite loss); message names the offending step.
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Sampler state became non-finite; message names the offending step.
struct SamplerError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Misconfigured experiment (missing checkpoint, empty grid, ...).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace fmchest
