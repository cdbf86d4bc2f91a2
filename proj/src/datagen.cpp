// SPDX-License-Identifier: Apache-2.0

#include "absvit/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "absvit/rng.hpp"

namespace absvit::data {

namespace {

void check_class(int class_id) {
  if (class_id < 0 || class_id >= kNumClasses) {
    throw std::invalid_argument("class id " + std::to_string(class_id) + " outside 0.." +
                                std::to_string(kNumClasses - 1));
  }
}

bool inside(ShapeClass shape, double dx, double dy, double r) {
  switch (shape) {
    case ShapeClass::square:
      return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ShapeClass::disk:
      return dx * dx + dy * dy <= r * r;
    case ShapeClass::cross:
      return std::abs(dx) <= r && std::abs(dy) <= r && (std::abs(dx) <= r / 3 || std::abs(dy) <= r / 3);
    case ShapeClass::triangle:
      return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
  }
  return false;
}

}  // namespace

const char* class_name(int class_id) {
  static const char* names[kNumClasses] = {"square", "disk", "cross", "triangle"};
  check_class(class_id);
  return names[class_id];
}

const char* side_name(Side side) {
  switch (side) {
    case Side::left: return "left";
    case Side::right: return "right";
    case Side::none: return "none";
  }
  return "none";
}

Image draw_panel(int class_id, std::uint64_t seed, int height, int width, const DataConfig& config) {
  check_class(class_id);
  if (height < 4 || width < 4) throw std::invalid_argument("panel must be at least 4x4");
  if (!(config.min_radius > 0) || config.max_radius < config.min_radius || config.noise_sigma < 0) {
    throw std::invalid_argument("invalid shape radius or noise config");
  }
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(class_id)));
  const double cap = std::min<double>(config.max_radius, 0.5 * std::min(height, width) - 1.0);
  const double lo = std::min(config.min_radius, cap);
  const double r = rng.uniform(lo, cap);
  const double cx = rng.uniform(r, width - r);
  const double cy = rng.uniform(r, height - r);
  const auto shape = static_cast<ShapeClass>(class_id);

  Image img{height, width, std::vector<float>(std::size_t(height) * width), std::vector<std::uint8_t>(std::size_t(height) * width)};
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t i = std::size_t(y) * width + x;
      const bool on = inside(shape, x + 0.5 - cx, y + 0.5 - cy, r);
      img.mask[i] = on ? 1 : 0;
      double v = on ? 1.0 : 0.0;
      if (config.noise_sigma > 0) v += config.noise_sigma * rng.normal();
      img.pixels[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

SyntheticSample gen_single_object(int class_id, std::uint64_t seed, const DataConfig& config) {
  return SyntheticSample{draw_panel(class_id, seed, config.height, config.width, config), class_id, Side::none, seed};
}

CompositeSample gen_two_object(int class_a, int class_b, std::uint64_t seed, const DataConfig& config) {
  if (config.width % 2 != 0) throw std::invalid_argument("composite width must be even");
  const int half = config.width / 2;
  const Image left = draw_panel(class_a, mix_seed(seed, 0), config.height, half, config);
  const Image right = draw_panel(class_b, mix_seed(seed, 1), config.height, half, config);
  CompositeSample out;
  out.left_class = class_a;
  out.right_class = class_b;
  out.seed = seed;
  const std::size_t n = std::size_t(config.height) * config.width;
  out.image = Image{config.height, config.width, std::vector<float>(n), std::vector<std::uint8_t>(n)};
  out.left_mask.assign(n, 0);
  out.right_mask.assign(n, 0);
  for (int y = 0; y < config.height; ++y) {
    for (int x = 0; x < half; ++x) {
      const std::size_t src = std::size_t(y) * half + x;
      const std::size_t l = std::size_t(y) * config.width + x;
      const std::size_t r = l + half;
      out.image.pixels[l] = left.pixels[src];
      out.image.pixels[r] = right.pixels[src];
      out.left_mask[l] = left.mask[src];
      out.right_mask[r] = right.mask[src];
      out.image.mask[l] = left.mask[src];
      out.image.mask[r] = right.mask[src];
    }
  }
  return out;
}

std::uint64_t split_base(Split split) {
  switch (split) {
    case Split::train: return 0;
    case Split::test: return 1'000'000;
    case Split::steer: return 2'000'000;
  }
  return 0;
}

num::Tensor<float> Dataset::batch(std::size_t begin, std::size_t count) const {
  if (begin + count > size()) throw std::out_of_range("batch exceeds dataset size");
  const std::size_t px = std::size_t(height) * width;
  return num::Tensor<float>({count, std::size_t(height), std::size_t(width)},
                            std::vector<float>(images.begin() + begin * px, images.begin() + (begin + count) * px));
}

num::Tensor<float> Dataset::batch(const std::vector<std::size_t>& indices) const {
  const std::size_t px = std::size_t(height) * width;
  std::vector<float> data;
  data.reserve(indices.size() * px);
  for (std::size_t i : indices) {
    if (i >= size()) throw std::out_of_range("dataset index out of range");
    data.insert(data.end(), images.begin() + i * px, images.begin() + (i + 1) * px);
  }
  return num::Tensor<float>({indices.size(), std::size_t(height), std::size_t(width)}, std::move(data));
}

Dataset make_dataset(Split split, std::size_t count, const DataConfig& config, std::size_t offset) {
  if (offset + count >= 1'000'000) throw std::invalid_argument("dataset larger than its seed range");
  Dataset ds;
  ds.height = config.height;
  ds.width = config.width;
  ds.images.reserve(count * config.height * config.width);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>((offset + i) % kNumClasses);
    const std::uint64_t seed = split_base(split) + offset + i;
    const auto s = gen_single_object(label, seed, config);
    ds.images.insert(ds.images.end(), s.image.pixels.begin(), s.image.pixels.end());
    ds.labels.push_back(label);
    ds.seeds.push_back(seed);
  }
  return ds;
}

std::pair<int, int> composite_classes(std::size_t index) {
  const int pairs = kNumClasses * (kNumClasses - 1);
  const int k = static_cast<int>(index % pairs);
  const int a = k / (kNumClasses - 1);
  int b = k % (kNumClasses - 1);
  if (b >= a) ++b;
  return {a, b};
}

std::vector<float> class_prototype(const num::Tensor<float>& head_weight, int class_id) {
  if (head_weight.rank() != 2) throw num::ShapeError("classifier head must be [K, c]");
  if (class_id < 0 || std::size_t(class_id) >= head_weight.dim(0)) {
    throw std::invalid_argument("class id " + std::to_string(class_id) + " outside the head's " +
                                std::to_string(head_weight.dim(0)) + " rows");
  }
  const std::size_t c = head_weight.dim(1);
  const auto d = head_weight.data();
  return std::vector<float>(d.begin() + class_id * c, d.begin() + (class_id + 1) * c);
}

}  // namespace absvit::data
