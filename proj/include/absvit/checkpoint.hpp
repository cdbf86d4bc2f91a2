// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: a JSON manifest (name, dtype, shape, byte offset per
// tensor, plus the run config) next to one little-endian raw blob. Tensors are
// stored in name order, so identical parameters give identical files.

#pragma once

#include <stdexcept>
#include <string>

#include "absvit/config.hpp"
#include "absvit/model.hpp"

namespace absvit::ckpt {

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kFormatName = "absvit-checkpoint";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct Checkpoint {
  cfg::RunConfig config;
  model::ParamMap<T> params;
};

/// Writes `<manifest_path>` and a blob named after it with a ".bin" suffix
/// (replacing ".json" when present).
template <typename T>
void save(const std::string& manifest_path, const cfg::RunConfig& config, const model::ParamMap<T>& params);

/// Reads and validates a checkpoint. Rejects a format or version mismatch, a
/// dtype other than T, a truncated blob (naming the first missing tensor) and
/// parameter shapes that do not fit the stored config.
template <typename T>
Checkpoint<T> load(const std::string& manifest_path);

std::string blob_path_for(const std::string& manifest_path);

}  // namespace absvit::ckpt
