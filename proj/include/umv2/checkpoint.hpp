// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "umv2/model.hpp"

namespace umv2 {

// Layout:
//   UMV2CKPT v1
//   config: <model config json>
//   meta: <gains, shuffle seeds, caller json>
//   tensors: <count>
//   <name> <f32|f64> <rows>x<cols> <offset> <bytes>     (one line per tensor)
//   payload: <bytes>
//   <raw little-endian tensor data; offsets are relative to its start>

inline constexpr const char* kCheckpointMagic = "UMV2CKPT v1";

struct ManifestEntry {
  std::string name;
  std::string dtype;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::uint64_t offset = 0;
  std::uint64_t bytes = 0;
};

struct CheckpointHeader {
  nlohmann::json config;
  nlohmann::json meta;
  std::vector<ManifestEntry> entries;
  std::uint64_t payload_bytes = 0;
  std::uint64_t payload_start = 0;  // file offset of the payload
};

/// Parses and validates the text header: version, entry syntax, offsets
/// (in bounds, non-overlapping, sized to their shape) and file length.
CheckpointHeader read_checkpoint_header(const std::string& path);

template <typename T>
struct LoadedCheckpoint {
  Model<T> model;
  nlohmann::json extra;
};

/// Writes via a temporary file and rename. `extra` lands in meta.extra.
template <typename T>
void save_checkpoint(const Model<T>& m, const std::string& path, const nlohmann::json& extra = nlohmann::json::object());

/// Throws LoadError on a version mismatch, truncated payload, bad offsets or
/// tensors that do not match the config.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path);

}  // namespace umv2
