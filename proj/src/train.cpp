// SPDX-License-Identifier: Apache-2.0

#include "absvit/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "absvit/objectives.hpp"
#include "absvit/rng.hpp"

namespace absvit::train {

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

int argmax_row(const num::Tensor<float>& logits, std::size_t row) {
  const std::size_t k = logits.dim(1);
  const auto d = logits.data().subspan(row * k, k);
  return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
}

}  // namespace

std::string format_record(const EpochRecord& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "event=epoch epoch=%d loss=%.9g ce=%.9g recon=%.9g prior_loss=%.9g train_acc=%.6f test_acc=%.6f "
                "lr=%.6g seconds=%.3f",
                r.epoch, r.loss, r.ce, r.recon, r.prior_loss, r.train_accuracy, r.test_accuracy, r.lr, r.seconds);
  return buf;
}

Predictor::Predictor(model::ModelConfig config, model::ParamMap<float> params, std::size_t batch,
                     model::TraceLevel trace)
    : config_(std::move(config)), params_(std::move(params)), batch_(batch), trace_(trace) {
  if (batch_ == 0) throw std::invalid_argument("predictor batch must be >= 1");
}

void Predictor::set_params(const model::ParamMap<float>& params) {
  params_ = params;
  for (auto& [_, n] : nets_) n->set_params(params_);
}

model::AbsVit<float>& Predictor::net(std::size_t batch) {
  auto& slot = nets_[batch];
  if (!slot) {
    model::BuildOptions o;
    o.batch = batch;
    o.trace = trace_;
    slot = std::make_unique<model::AbsVit<float>>(config_, o, params_);
  }
  return *slot;
}

std::map<std::string, num::Tensor<float>> Predictor::run(const num::Tensor<float>& images, double alpha,
                                                         const model::PriorSpec& prior) {
  if (images.rank() != 3) throw num::ShapeError("predictor expects [n, H, W] images");
  const std::size_t n = images.dim(0), px = images.dim(1) * images.dim(2);
  std::map<std::string, std::vector<float>> parts;
  std::map<std::string, num::Shape> shapes;
  for (std::size_t begin = 0; begin < n; begin += batch_) {
    const std::size_t count = std::min(batch_, n - begin);
    const auto src = images.data().subspan(begin * px, count * px);
    num::Tensor<float> chunk({count, images.dim(1), images.dim(2)}, std::vector<float>(src.begin(), src.end()));
    for (auto& [name, t] : net(count).run(chunk, alpha, prior)) {
      if (t.rank() == 0) continue;
      auto& dst = parts[name];
      dst.insert(dst.end(), t.data().begin(), t.data().end());
      auto& s = shapes[name];
      if (s.empty()) {
        s = t.shape();
        s[0] = 0;
      }
      s[0] += t.dim(0);
    }
  }
  std::map<std::string, num::Tensor<float>> out;
  for (auto& [name, v] : parts) out.emplace(name, num::Tensor<float>(shapes.at(name), v));
  return out;
}

std::vector<int> Predictor::predict(const num::Tensor<float>& images, double alpha, const model::PriorSpec& prior) {
  const auto logits = run(images, alpha, prior).at("logits");
  std::vector<int> out(logits.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = argmax_row(logits, i);
  return out;
}

double accuracy(Predictor& predictor, const data::Dataset& dataset, double alpha, const model::PriorSpec& prior) {
  if (dataset.size() == 0) throw std::invalid_argument("accuracy of an empty dataset");
  const auto pred = predictor.predict(dataset.batch(0, dataset.size()), alpha, prior);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == dataset.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

TrainResult train(const cfg::RunConfig& config, const LogFn& log) {
  config.validate();
  const auto& mc = config.model;
  const auto& tc = config.train;
  const auto train_size = static_cast<std::size_t>(tc.train_size);
  auto train_set = data::make_dataset(data::Split::train, train_size, config.data);
  const auto test_set = data::make_dataset(data::Split::test, static_cast<std::size_t>(tc.test_size), config.data);

  const std::size_t B = static_cast<std::size_t>(tc.batch_size);
  model::BuildOptions opts;
  opts.batch = B;
  opts.with_loss = true;
  opts.loss = config.loss;
  model::AbsVit<float> net(mc, opts, model::init_params(mc, tc.seed));
  auto& graph = net.graph();
  obj::AdamW<float> optimizer(config.optim, model::decays);
  Predictor eval(mc, net.params(), B);

  const std::size_t steps_per_epoch = train_set.size() / B;
  const std::uint64_t total = steps_per_epoch * static_cast<std::uint64_t>(tc.epochs);
  const auto warmup = static_cast<std::uint64_t>(std::llround(tc.warmup_epochs * double(steps_per_epoch)));
  if (log) {
    log("event=start train_size=" + std::to_string(train_set.size()) + " test_size=" + std::to_string(test_set.size()) +
        " steps_per_epoch=" + std::to_string(steps_per_epoch) + " epochs=" + std::to_string(tc.epochs) +
        " params=" + std::to_string(net.params().size()) + " resample=" + (tc.resample ? "true" : "false"));
  }

  TrainResult result;
  std::uint64_t step = 0;
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (tc.resample && epoch > 1) {
      train_set = data::make_dataset(data::Split::train, train_size, config.data, (epoch - 1) * train_size);
    }
    const auto order = epoch_order(train_set.size(), tc.seed, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t hits = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::vector<std::size_t> idx(order.begin() + s * B, order.begin() + (s + 1) * B);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train_set.labels[i]);
      const auto out = graph.eval(net.bind(train_set.batch(idx), mc.alpha, {}, labels));
      const auto grads = graph.grad(net.loss_node());
      rec.lr = obj::learning_rate(config.optim.lr, step, warmup, total);
      optimizer.step(graph, grads, rec.lr);
      ++step;
      rec.loss += out.at("loss").item();
      rec.ce += out.at("ce").item();
      rec.recon += out.at("recon").item();
      rec.prior_loss += out.at("prior_loss").item();
      const auto& logits = out.at("logits");
      for (std::size_t b = 0; b < B; ++b) hits += argmax_row(logits, b) == labels[b];
    }
    const double steps = static_cast<double>(steps_per_epoch);
    rec.loss /= steps;
    rec.ce /= steps;
    rec.recon /= steps;
    rec.prior_loss /= steps;
    rec.train_accuracy = static_cast<double>(hits) / (steps * static_cast<double>(B));
    eval.set_params(net.params());
    rec.test_accuracy = accuracy(eval, test_set, mc.alpha);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(rec.loss)) throw num::NumericError("non-finite mean loss in epoch " + std::to_string(epoch));
    if (log) log(format_record(rec));
    result.history.push_back(rec);
  }

  result.params = net.params();
  if (tc.epochs > 0) {
    result.final_loss = result.history.back().loss;
    result.test_accuracy = result.history.back().test_accuracy;
  } else {
    double loss = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<int> labels(train_set.labels.begin() + s * B, train_set.labels.begin() + (s + 1) * B);
      loss += graph.eval(net.bind(train_set.batch(s * B, B), mc.alpha, {}, labels)).at("loss").item();
    }
    result.final_loss = loss / static_cast<double>(steps_per_epoch);
    result.test_accuracy = accuracy(eval, test_set, mc.alpha);
  }
  if (log) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "event=done final_loss=%.9g test_acc=%.6f", result.final_loss, result.test_accuracy);
    log(buf);
  }
  return result;
}

}  // namespace absvit::train
