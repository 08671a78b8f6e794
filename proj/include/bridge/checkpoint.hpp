#pragma once

#include <string>

#include "bridge/model.hpp"

namespace bridge {

// Versioned parameter snapshot. Layout (all little-endian):
//   magic "BRDG", format version u32, config snapshot (length-prefixed
//   text), stage marker u32, step counter u64, parameter table
//   (name, shape dims), raw f32 payload in table order, CRC32 over the
//   payload bytes.
// Master weights always hold exact f32 values, so save/load round-trips
// parameters bitwise.
struct CheckpointMeta {
    uint32_t version = 0;
    std::string config_text;
    char stage = 'I';
    uint64_t step = 0;
};

constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Model& model, const std::string& config_text, char stage,
                     uint64_t step);

// Header only: enough to rebuild the model from the embedded config.
CheckpointMeta read_checkpoint_meta(const std::string& path);

// Loads parameters into an existing model. Refuses on version mismatch
// (VersionError), payload corruption (ChecksumError), unknown/missing or
// shape-mismatched parameters (ShapeError naming the offender), and on a
// config snapshot that differs from `expected_config_text` when provided.
CheckpointMeta load_checkpoint(const std::string& path, Model& model,
                               const std::string* expected_config_text = nullptr);

}  // namespace bridge
