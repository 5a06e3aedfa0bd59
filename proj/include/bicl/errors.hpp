#pragma once

#include <stdexcept>
#include <string>

namespace bicl {

// Shape or dimension contract violated by the caller.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Checkpoint file could not be read or failed validation.
struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid hook site, conflicting hooks, or a payload of the wrong size.
struct HookError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A rendered prompt does not fit into max_positions.
struct ContextOverflowError : std::length_error {
    ContextOverflowError(const std::string& what, std::size_t length, std::size_t limit)
        : std::length_error(what), length(length), limit(limit) {}
    std::size_t length;
    std::size_t limit;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace bicl
