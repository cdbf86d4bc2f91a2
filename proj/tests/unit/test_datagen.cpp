// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "absvit/datagen.hpp"
#include "absvit/rng.hpp"

namespace dg = absvit::data;

namespace {

double pixel_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::vector<double> as_double(const std::vector<float>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(SingleObject, DeterministicPerClassAndSeed) {
  const auto a = dg::gen_single_object(2, 17);
  const auto b = dg::gen_single_object(2, 17);
  EXPECT_EQ(a.image.pixels, b.image.pixels);
  EXPECT_EQ(a.image.mask, b.image.mask);
  EXPECT_NE(a.image.pixels, dg::gen_single_object(2, 18).image.pixels);
  EXPECT_NE(a.image.pixels, dg::gen_single_object(1, 17).image.pixels);
}

TEST(SingleObject, NoiselessImageIsTheMask) {
  dg::DataConfig cfg;
  cfg.noise_sigma = 0.0;
  for (int k = 0; k < dg::kNumClasses; ++k) {
    const auto s = dg::gen_single_object(k, 5, cfg);
    for (std::size_t i = 0; i < s.image.pixels.size(); ++i) {
      ASSERT_TRUE(s.image.pixels[i] == 0.0f || s.image.pixels[i] == 1.0f);
      ASSERT_EQ(s.image.pixels[i], float(s.image.mask[i]));
    }
  }
}

TEST(SingleObject, PixelsStayInUnitRange) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = dg::gen_single_object(int(seed % 4), seed);
    for (float p : s.image.pixels) ASSERT_TRUE(p >= 0.0f && p <= 1.0f);
    EXPECT_EQ(s.label, int(seed % 4));
    EXPECT_EQ(s.object_side, dg::Side::none);
  }
}

TEST(SingleObject, ClassesAreSeparableOnAverage) {
  // Mean distance between images of different classes exceeds the mean
  // distance between images of the same class.
  const int per_class = 1000;
  std::vector<std::vector<std::vector<double>>> imgs(dg::kNumClasses);
  for (int k = 0; k < dg::kNumClasses; ++k)
    for (int s = 0; s < per_class; ++s) imgs[k].push_back(as_double(dg::gen_single_object(k, s).image.pixels));
  double intra = 0.0, inter = 0.0;
  int n_intra = 0, n_inter = 0;
  for (int k = 0; k < dg::kNumClasses; ++k) {
    for (int s = 0; s + 1 < per_class; s += 2) {
      intra += pixel_distance(imgs[k][s], imgs[k][s + 1]);
      ++n_intra;
      inter += pixel_distance(imgs[k][s], imgs[(k + 1) % dg::kNumClasses][s + 1]);
      ++n_inter;
    }
  }
  EXPECT_GT(inter / n_inter, intra / n_intra);
  // Class-mean images differ pairwise.
  for (int a = 0; a < dg::kNumClasses; ++a) {
    for (int b = a + 1; b < dg::kNumClasses; ++b) {
      std::vector<double> ma(imgs[a][0].size(), 0.0), mb(ma);
      for (int s = 0; s < per_class; ++s)
        for (std::size_t i = 0; i < ma.size(); ++i) {
          ma[i] += imgs[a][s][i] / per_class;
          mb[i] += imgs[b][s][i] / per_class;
        }
      EXPECT_GT(pixel_distance(ma, mb), 0.5) << a << " vs " << b;
    }
  }
}

TEST(SingleObject, RejectsUnknownClass) {
  EXPECT_THROW(dg::gen_single_object(4, 0), std::invalid_argument);
  EXPECT_THROW(dg::gen_single_object(-1, 0), std::invalid_argument);
}

TEST(TwoObject, SameClassOnBothSides) {
  const auto c = dg::gen_two_object(1, 1, 9);
  EXPECT_EQ(c.left_class, 1);
  EXPECT_EQ(c.right_class, 1);
  int left = 0, right = 0;
  for (std::size_t i = 0; i < c.left_mask.size(); ++i) {
    left += c.left_mask[i];
    right += c.right_mask[i];
  }
  EXPECT_GT(left, 0);
  EXPECT_GT(right, 0);
}

TEST(TwoObject, SwappingClassesSwapsSides) {
  const auto ab = dg::gen_two_object(0, 3, 4);
  const auto ba = dg::gen_two_object(3, 0, 4);
  EXPECT_EQ(ab.class_on(dg::Side::left), ba.class_on(dg::Side::right));
  EXPECT_EQ(ab.class_on(dg::Side::right), ba.class_on(dg::Side::left));
  // The left panel of one is drawn from the same panel seed as the left of the other.
  const auto lone = dg::draw_panel(0, absvit::mix_seed(4, 0), 32, 16, {});
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 16; ++x) ASSERT_EQ(ab.image.pixels[y * 32 + x], lone.pixels[y * 16 + x]);
}

TEST(TwoObject, MaskMassMatchesSides) {
  dg::DataConfig cfg;
  for (std::size_t i = 0; i < 200; ++i) {
    const auto [a, b] = dg::composite_classes(i);
    const auto c = dg::gen_two_object(a, b, dg::split_base(dg::Split::steer) + i, cfg);
    double left_mass = 0.0, right_mass = 0.0, left_in_right = 0.0;
    for (int y = 0; y < cfg.height; ++y) {
      for (int x = 0; x < cfg.width; ++x) {
        const std::size_t p = std::size_t(y) * cfg.width + x;
        const bool on_left = x < cfg.width / 2;
        (on_left ? left_mass : right_mass) += c.image.pixels[p] * (c.image.mask[p] ? 1.0 : 0.0);
        if (!on_left) left_in_right += c.left_mask[p];
      }
    }
    ASSERT_GT(left_mass, 0.0) << i;
    ASSERT_GT(right_mass, 0.0) << i;
    ASSERT_EQ(left_in_right, 0.0) << i;
  }
}

TEST(TwoObject, ClassPairsAreBalanced) {
  std::vector<int> left(4, 0), right(4, 0);
  std::set<std::pair<int, int>> seen;
  for (std::size_t i = 0; i < 12; ++i) {
    const auto p = dg::composite_classes(i);
    EXPECT_NE(p.first, p.second);
    seen.insert(p);
    ++left[p.first];
    ++right[p.second];
  }
  EXPECT_EQ(seen.size(), 12u);
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(left[k], 3);
    EXPECT_EQ(right[k], 3);
  }
}

TEST(Dataset, SplitsUseDisjointSeeds) {
  const auto train = dg::make_dataset(dg::Split::train, 64);
  const auto test = dg::make_dataset(dg::Split::test, 64);
  std::set<std::uint64_t> a(train.seeds.begin(), train.seeds.end());
  for (auto s : test.seeds) EXPECT_EQ(a.count(s), 0u);
  EXPECT_EQ(train.labels[5], 1);
  const auto batch = train.batch(4, 3);
  EXPECT_EQ(batch.shape(), (absvit::num::Shape{3, 32, 32}));
  EXPECT_EQ(batch.data()[0], dg::gen_single_object(0, 4).image.pixels[0]);
  EXPECT_THROW(train.batch(63, 2), std::out_of_range);
}

TEST(ClassPrototype, ReturnsHeadRow) {
  absvit::num::Tensor<float> head({3, 3}, std::vector<float>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(dg::class_prototype(head, 1), (std::vector<float>{0, 1, 0}));
  EXPECT_THROW(dg::class_prototype(head, 3), std::invalid_argument);
}
