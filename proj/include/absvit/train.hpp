// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "absvit/config.hpp"
#include "absvit/datagen.hpp"
#include "absvit/model.hpp"

namespace absvit::train {

struct EpochRecord {
  int epoch = 0;
  double loss = 0, ce = 0, recon = 0, prior_loss = 0;  // means over the epoch's batches
  double train_accuracy = 0;
  double test_accuracy = 0;
  double lr = 0;  // at the epoch's last step
  double seconds = 0;
};

/// `event=epoch epoch=3 loss=... ...` on one line.
std::string format_record(const EpochRecord& r);

struct TrainResult {
  model::ParamMap<float> params;
  std::vector<EpochRecord> history;
  double final_loss = 0;  // last epoch's mean loss; a pass over the training set when epochs = 0
  double test_accuracy = 0;
};

using LogFn = std::function<void(const std::string&)>;

/// Trains on gen_single_object data in float32. Each epoch visits its
/// training images (a fresh block when resampling) in an order drawn from
/// Rng(mix_seed(seed, epoch)) and drops the final partial batch. Throws num::NumericError on a non-finite loss or
/// gradient.
TrainResult train(const cfg::RunConfig& config, const LogFn& log = {});

/// Batched float32 inference. Graphs are built once per batch size.
class Predictor {
 public:
  Predictor(model::ModelConfig config, model::ParamMap<float> params, std::size_t batch = 64,
            model::TraceLevel trace = model::TraceLevel::minimal);

  void set_params(const model::ParamMap<float>& params);

  /// Runs images [n, H, W] in chunks and returns each marked output
  /// concatenated along the sample axis (scalars are dropped).
  std::map<std::string, num::Tensor<float>> run(const num::Tensor<float>& images, double alpha,
                                                const model::PriorSpec& prior = {});

  std::vector<int> predict(const num::Tensor<float>& images, double alpha, const model::PriorSpec& prior = {});

  const model::ModelConfig& config() const { return config_; }
  const model::ParamMap<float>& params() const { return params_; }

 private:
  model::AbsVit<float>& net(std::size_t batch);

  model::ModelConfig config_;
  model::ParamMap<float> params_;
  std::size_t batch_;
  model::TraceLevel trace_;
  std::map<std::size_t, std::unique_ptr<model::AbsVit<float>>> nets_;
};

double accuracy(Predictor& predictor, const data::Dataset& dataset, double alpha,
                const model::PriorSpec& prior = {});

}  // namespace absvit::train
