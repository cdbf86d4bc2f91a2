// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "absvit/train.hpp"

namespace tr = absvit::train;

namespace {

absvit::cfg::RunConfig tiny_run(int epochs) {
  absvit::cfg::RunConfig c;
  c.model.image_size = 16;
  c.model.patch = 8;
  c.model.layers = 2;
  c.model.dim = 16;
  c.model.heads = 2;
  c.model.mlp_ratio = 2;
  c.data.height = c.data.width = 16;
  c.data.min_radius = 3.0;
  c.data.max_radius = 6.0;
  c.train.epochs = epochs;
  c.train.batch_size = 16;
  c.train.train_size = 64;
  c.train.test_size = 32;
  c.train.seed = 11;
  return c;
}

}  // namespace

TEST(Train, RepeatedRunsAreBitIdentical) {
  const auto cfg = tiny_run(2);
  const auto a = tr::train(cfg), b = tr::train(cfg);
  EXPECT_EQ(a.final_loss, b.final_loss);
  ASSERT_EQ(a.history.size(), 2u);
  for (const auto& [name, t] : a.params) EXPECT_EQ(t.storage(), b.params.at(name).storage()) << name;
  EXPECT_TRUE(std::isfinite(a.final_loss));
}

TEST(Train, DifferentSeedsDiverge) {
  auto cfg = tiny_run(1);
  const auto a = tr::train(cfg);
  cfg.train.seed = 12;
  EXPECT_NE(a.final_loss, tr::train(cfg).final_loss);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  auto cfg = tiny_run(0);
  cfg.train.test_size = 400;
  const auto r = tr::train(cfg);
  EXPECT_TRUE(r.history.empty());
  const auto init = absvit::model::init_params(cfg.model, cfg.train.seed);
  for (const auto& [name, t] : init) EXPECT_EQ(r.params.at(name).storage(), t.storage()) << name;
  EXPECT_TRUE(std::isfinite(r.final_loss));
  // Balanced labels: an untrained model sits near chance.
  EXPECT_NEAR(r.test_accuracy, 0.25, 0.15);
}

TEST(Train, LogsStartEpochAndDoneRecords) {
  std::vector<std::string> lines;
  tr::train(tiny_run(2), [&](const std::string& l) { lines.push_back(l); });
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0].rfind("event=start ", 0), 0u);
  for (int e = 1; e <= 2; ++e) {
    EXPECT_EQ(lines[e].rfind("event=epoch epoch=" + std::to_string(e) + " ", 0), 0u);
    for (const char* key : {" loss=", " ce=", " recon=", " prior_loss=", " test_acc=", " lr="})
      EXPECT_NE(lines[e].find(key), std::string::npos) << key;
  }
  EXPECT_EQ(lines[3].rfind("event=done ", 0), 0u);
}

TEST(Train, LossComponentsCombineWithConfiguredWeights) {
  auto cfg = tiny_run(1);
  cfg.loss.w_var = 0.0;
  const auto r = tr::train(cfg);
  EXPECT_EQ(r.history[0].loss, r.history[0].ce);
  EXPECT_GT(r.history[0].recon, 0.0);
}

TEST(Train, ResamplingDrawsNewImagesEachEpoch) {
  const auto first = absvit::data::make_dataset(absvit::data::Split::train, 8, {}, 0);
  const auto later = absvit::data::make_dataset(absvit::data::Split::train, 8, {}, 8);
  const auto both = absvit::data::make_dataset(absvit::data::Split::train, 16, {});
  EXPECT_EQ(later.batch(0, 8).storage(), both.batch(8, 8).storage());
  EXPECT_EQ(later.labels, std::vector<int>(both.labels.begin() + 8, both.labels.end()));
  EXPECT_NE(first.batch(0, 8).storage(), later.batch(0, 8).storage());

  auto cfg = tiny_run(2);
  const auto resampled = tr::train(cfg);
  cfg.train.resample = false;
  const auto fixed = tr::train(cfg);
  EXPECT_EQ(resampled.history[0].loss, fixed.history[0].loss);
  EXPECT_NE(resampled.history[1].loss, fixed.history[1].loss);
}

TEST(Predictor, ChunkedRunMatchesSingleBatch) {
  const auto cfg = tiny_run(0);
  const auto params = absvit::model::init_params(cfg.model, 4);
  const auto data = absvit::data::make_dataset(absvit::data::Split::test, 10, cfg.data);
  tr::Predictor whole(cfg.model, params, 10), chunked(cfg.model, params, 3);
  const auto a = whole.run(data.batch(0, 10), 1.0).at("logits");
  const auto b = chunked.run(data.batch(0, 10), 1.0).at("logits");
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-5);
  EXPECT_EQ(whole.predict(data.batch(0, 10), 1.0).size(), 10u);
}

TEST(Train, InvalidConfigIsRejectedBeforeTraining) {
  auto cfg = tiny_run(1);
  cfg.train.batch_size = 0;
  EXPECT_THROW(tr::train(cfg), absvit::cfg::ConfigError);
}
