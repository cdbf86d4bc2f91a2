// SPDX-License-Identifier: Apache-2.0
//
// Synthetic shape images. Every image is a pure function of its class ids,
// seed and config, generated with the project Rng so datasets are bit-stable.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "absvit/numerics/tensor.hpp"

namespace absvit::data {

inline constexpr int kNumClasses = 4;

enum class ShapeClass { square = 0, disk = 1, cross = 2, triangle = 3 };
enum class Side { left, right, none };

const char* class_name(int class_id);
const char* side_name(Side side);

struct DataConfig {
  int height = 32;
  int width = 32;
  double noise_sigma = 0.05;
  double min_radius = 4.0;
  double max_radius = 10.0;
};

/// Row-major H x W image with pixels in [0, 1] and the noiseless object mask.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;
  std::vector<std::uint8_t> mask;
};

struct SyntheticSample {
  Image image;
  int label = 0;
  Side object_side = Side::none;
  std::uint64_t seed = 0;
};

/// Two half-width panels side by side; masks cover the full image.
struct CompositeSample {
  Image image;
  int left_class = 0;
  int right_class = 0;
  std::vector<std::uint8_t> left_mask;
  std::vector<std::uint8_t> right_mask;
  std::uint64_t seed = 0;

  int class_on(Side side) const { return side == Side::left ? left_class : right_class; }
};

/// Draws one shape of the class into an H x W panel.
Image draw_panel(int class_id, std::uint64_t seed, int height, int width, const DataConfig& config);

SyntheticSample gen_single_object(int class_id, std::uint64_t seed, const DataConfig& config = {});
CompositeSample gen_two_object(int class_a, int class_b, std::uint64_t seed, const DataConfig& config = {});

enum class Split { train, test, steer };
/// First seed of each split; ranges are a million apart and never overlap
/// for datasets below that size.
std::uint64_t split_base(Split split);

struct Dataset {
  int height = 0;
  int width = 0;
  std::vector<float> images;  // N x H x W
  std::vector<int> labels;
  std::vector<std::uint64_t> seeds;

  std::size_t size() const { return labels.size(); }
  /// Images [begin, begin + count) as a float tensor [count, H, W].
  num::Tensor<float> batch(std::size_t begin, std::size_t count) const;
  num::Tensor<float> batch(const std::vector<std::size_t>& indices) const;
};

/// Sample i has label (offset + i) mod K and seed split_base(split) + offset + i.
Dataset make_dataset(Split split, std::size_t count, const DataConfig& config = {}, std::size_t offset = 0);

/// Ordered pair of distinct classes for composite i, cycling through all
/// K (K - 1) pairs so every class appears equally often on each side.
std::pair<int, int> composite_classes(std::size_t index);

/// Row class_id of a classifier head weight [K, c].
std::vector<float> class_prototype(const num::Tensor<float>& head_weight, int class_id);

}  // namespace absvit::data
