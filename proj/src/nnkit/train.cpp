// SPDX-License-Identifier: Apache-2.0
#include "genq/nnkit/train.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "genq/common/rng.hpp"

namespace genq::nn {

double top1_accuracy(const TensorF& logits, std::span<const int> labels) {
  const Index n = logits.dim(0);
  if (n == 0 || static_cast<Index>(labels.size()) != n) {
    throw ContractError("top1_accuracy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                        " predictions");
  }
  const Index classes = logits.dim(1);
  const auto lm = logits.matrix(n, classes);
  Index correct = 0;
  for (Index i = 0; i < n; ++i) {
    Index arg = 0;
    lm.row(i).maxCoeff(&arg);
    correct += arg == labels[static_cast<std::size_t>(i)] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

void sgd_step(std::vector<Parameter<float>*>& params, std::vector<TensorF>& velocity, double lr, double momentum,
              double weight_decay) {
  if (velocity.size() != params.size()) {
    velocity.clear();
    for (const auto* p : params) velocity.push_back(TensorF::zeros(p->value.shape()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<float>& p = *params[i];
    auto g = p.grad.vector();
    auto v = velocity[i].vector();
    const float wd = p.value.rank() >= 2 ? static_cast<float>(weight_decay) : 0.0F;
    v = static_cast<float>(momentum) * v + g + wd * p.value.vector();
    p.value.vector() -= static_cast<float>(lr) * v;
  }
}

TrainResult train_float(Model model, const TensorF& images, std::span<const int> labels, const TrainOptions& options,
                        const TensorF* eval_images, std::span<const int> eval_labels) {
  const Index n = images.dim(0);
  if (static_cast<Index>(labels.size()) != n || n == 0) {
    throw ContractError("train_float: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                        " images");
  }
  for (const int y : labels) {
    if (y < 0 || y >= model.num_classes()) {
      throw ContractError("train_float: label " + std::to_string(y) + " outside model class count");
    }
  }
  TrainResult result{std::move(model), {}, 0.0};
  Model& m = result.model;
  std::vector<Parameter<float>*> trainable;
  for (auto& p : m.parameters()) {
    if (p.trainable) trainable.push_back(&p);
  }
  std::vector<TensorF> velocity;
  const Index batch = options.batch_size;
  const std::size_t steps_per_epoch = static_cast<std::size_t>((n + batch - 1) / batch);
  const std::size_t total = steps_per_epoch * static_cast<std::size_t>(std::max(options.epochs, 0));
  const Rng shuffle_root = Rng(options.seed).split("shuffle");
  std::size_t step = 0;
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    Rng rng = shuffle_root.split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.uniform_int(i)]);
    }
    double loss_sum = 0.0;
    for (Index first = 0; first < n; first += batch) {
      const Index count = std::min(batch, n - first);
      if (count < 2) continue;  // BatchNorm needs two samples
      const std::span<const Index> idx(order.data() + first, static_cast<std::size_t>(count));
      const TensorF x = images.gather(idx);
      std::vector<int> y(idx.size());
      for (std::size_t j = 0; j < idx.size(); ++j) y[j] = labels[static_cast<std::size_t>(idx[j])];

      for (auto* p : trainable) p->zero_grad();
      Tape<float> tape;
      ForwardContext ctx;
      ctx.mode = BatchNormMode::train;
      ctx.update_running = true;
      const Var<float> loss = cross_entropy(m.forward(tape, x, ctx), std::span<const int>(y));
      const float lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        std::ostringstream os;
        os << "train_float: non-finite loss at epoch " << epoch << ", step " << step << " (batch starting at "
           << first << ")";
        throw NumericError(os.str());
      }
      tape.backward(loss);
      sgd_step(trainable, velocity, cosine_lr(options.lr, step, total), options.momentum, options.weight_decay);
      loss_sum += static_cast<double>(lv) * static_cast<double>(count);
      ++step;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(n));
  }
  if (eval_images) {
    result.accuracy = top1_accuracy(m.logits(*eval_images), eval_labels);
  } else {
    result.accuracy = top1_accuracy(m.logits(images), labels);
  }
  return result;
}

}  // namespace genq::nn
