// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "genq/nnkit/model.hpp"

namespace genq::nn {

struct TrainOptions {
  int epochs = 30;
  double lr = 0.05;
  int batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
};

struct TrainResult {
  Model model;
  std::vector<double> epoch_loss;
  /// Eval-mode accuracy on the evaluation images (training images if none given).
  double accuracy = 0.0;
};

/// Full-precision training: SGD with momentum and cosine learning-rate decay,
/// BatchNorm in train mode with running-statistics updates. Deterministic in
/// `options.seed`.
TrainResult train_float(Model model, const TensorF& images, std::span<const int> labels, const TrainOptions& options,
                        const TensorF* eval_images = nullptr, std::span<const int> eval_labels = {});

/// Top-1 accuracy of logits [N x C] against labels.
double top1_accuracy(const TensorF& logits, std::span<const int> labels);

/// Cosine-annealed learning rate at `step` of `total` steps.
double cosine_lr(double base, std::size_t step, std::size_t total);

/// In-place SGD with momentum over the trainable parameters; `velocity` is
/// resized on first use.
void sgd_step(std::vector<Parameter<float>*>& params, std::vector<TensorF>& velocity, double lr, double momentum,
              double weight_decay);

}  // namespace genq::nn
