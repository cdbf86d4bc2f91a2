// SPDX-License-Identifier: Apache-2.0
//
// Versioned run configuration. Serialized as JSON; every section is optional
// and falls back to the defaults below, but unknown keys are errors.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "absvit/datagen.hpp"
#include "absvit/model.hpp"
#include "absvit/objectives.hpp"

namespace absvit::cfg {

inline constexpr int kConfigVersion = 1;
inline constexpr const char* kConfigSchema = "absvit-run";

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainSpec {
  int epochs = 30;
  int batch_size = 64;
  int train_size = 2048;
  int test_size = 512;
  double warmup_epochs = 1.0;
  std::uint64_t seed = 0;
  /// Draw a fresh block of train_size images for every epoch: epoch e uses
  /// train seeds [(e - 1) train_size, e train_size).
  bool resample = true;
};

struct RunConfig {
  model::ModelConfig model;
  model::LossWeights loss;
  obj::AdamWHyper optim{1e-3, 0.9, 0.999, 1e-8, 0.05};
  TrainSpec train;
  data::DataConfig data;  // height and width follow model.image_size
  std::string out_dir = "runs/default";

  /// Throws ConfigError naming the offending field.
  void validate() const;

  std::string to_json() const;
  /// Parses and validates; throws ConfigError on syntax errors, unknown
  /// keys, wrong types, a schema or version mismatch, or invalid values.
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::string& path);
  void save(const std::string& path) const;
};

}  // namespace absvit::cfg
