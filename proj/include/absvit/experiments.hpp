// SPDX-License-Identifier: Apache-2.0
//
// Steering, alpha sweep, decoding probe and attention-map export on a
// trained model, plus the small file writers they share.

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "absvit/datagen.hpp"
#include "absvit/model.hpp"
#include "absvit/train.hpp"

namespace absvit::exp {

/// --prior values: "learned", "class:ID" or "none" (no top-down signal).
struct PriorChoice {
  enum class Kind { learned, class_prototype, none } kind = Kind::learned;
  int class_id = -1;

  static PriorChoice parse(const std::string& text);
  std::string str() const;
  /// Resolves to the model prior; `none` maps to the learned prior, and the
  /// caller runs it at alpha = 0.
  model::PriorSpec resolve(const model::ParamMap<float>& params) const;
  double effective_alpha(double alpha) const { return kind == Kind::none ? 0.0 : alpha; }
};

std::vector<double> prototype(const model::ParamMap<float>& params, int class_id);

/// Composite i of the steering split: classes from composite_classes(i), or
/// the fixed pair when given.
data::CompositeSample steer_composite(std::size_t index, const data::DataConfig& config,
                                      std::optional<std::pair<int, int>> classes = std::nullopt);

struct SteerRow {
  std::size_t index = 0;
  int left_class = 0, right_class = 0;
  data::Side cued = data::Side::left;
  int cued_class = 0, other_class = 0;
  double gap_base = 0;   // logit(cued) - logit(other) at alpha = 0
  double gap_steer = 0;  // same with xi = prototype(cued) at the steering alpha
  bool success = false;  // gap_steer > gap_base
};

struct SteerReport {
  double alpha = 0;
  std::vector<SteerRow> rows;  // two per image, cue left then cue right
  double success_left = 0, success_right = 0;
  double argmax_cued_base = 0, argmax_cued_steer = 0;  // fraction predicting the cued class
};

SteerReport steer(train::Predictor& predictor, const data::DataConfig& config, std::size_t images, double alpha,
                  std::optional<std::pair<int, int>> classes = std::nullopt);

struct SweepPoint {
  double alpha = 0;
  double cued_mass = 0;  // mean share of token-norm mass on the cued half
  double cued_mass_left = 0, cued_mass_right = 0;
};

/// Needs a predictor built with TraceLevel::full.
std::vector<SweepPoint> alpha_sweep(train::Predictor& predictor, const data::DataConfig& config, std::size_t images,
                                    const std::vector<double>& alphas);

/// Non-decreasing up to a relative slack: m[i+1] >= (1 - slack) m[i].
bool non_decreasing(const std::vector<SweepPoint>& sweep, double slack);

struct ProbeErrors {
  double all = 0, foreground = 0, background = 0;  // mean squared pixel error
};

struct ProbeReport {
  double alpha = 0;
  std::size_t fit_images = 0, eval_images = 0;
  double fit_error = 0;  // training MSE of the probe on bottom-up signals
  ProbeErrors bu, td, combined;
  /// First composite, cue left: [original, bu, td, combined] as H x W images.
  std::vector<std::vector<float>> example;
};

/// Fits a token-wise affine map from x0_bu to patch pixels by least squares on
/// single-object training images, then decodes x0_bu, x0_td and their sum on
/// steering composites cued with each object's class prototype. Foreground is
/// the cued object's mask; background is every other pixel.
ProbeReport probe(train::Predictor& predictor, const data::DataConfig& config, std::size_t fit_images,
                  std::size_t eval_images, double alpha);

struct NormMap {
  int rows = 0, cols = 0;
  std::vector<double> values;  // raw per-token L2 norms, row-major
};

NormMap token_norm_map(train::Predictor& predictor, const num::Tensor<float>& image, double alpha,
                       const model::PriorSpec& prior);

/// --image values: "single:CLASS:SEED" or "composite:A:B:SEED".
num::Tensor<float> parse_image_spec(const std::string& spec, const data::DataConfig& config);

/// 8-bit binary PGM (P5); values are min-max normalized, constant maps are mid-gray.
void write_pgm(const std::string& path, const std::vector<double>& values, int rows, int cols);
/// Reads back a P5 file written by write_pgm.
std::vector<unsigned char> read_pgm(const std::string& path, int& rows, int& cols);
void write_norm_csv(const std::string& path, const NormMap& map);

/// [n*N, p*p] patch rows back to n images of H x W.
std::vector<float> unpatchify(const std::vector<double>& patches, int image_size, int patch);

}  // namespace absvit::exp
