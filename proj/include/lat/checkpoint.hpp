#pragma once

#include <string>

#include "lat/trainer.hpp"

namespace lat {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// "LATF" container: version, canonical config echo, named little-endian fp32
// tensors (parameters plus optimizer state), trailing crc32. Loading
// reproduces parameters bitwise; a bad checksum or header is rejected.
void save_checkpoint(const std::string& path, const TrainState& state, const std::string& config_echo);

struct LoadedCheckpoint {
    TrainState state;
    std::string config_echo;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// write-temp-then-rename
void atomic_write_file(const std::string& path, const std::string& contents);

uint32_t crc32(const void* data, size_t n, uint32_t seed = 0);

}  // namespace lat
