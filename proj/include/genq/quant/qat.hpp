// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "genq/quant/quantized_model.hpp"

namespace genq::quant {

struct QatOptions {
  int epochs = 20;
  double lr = 1e-3;
  int batch_size = 64;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct QatResult {
  QuantizedModel model;
  std::vector<double> epoch_loss;
};

/// Finetunes a reconstructed model: every float weight and rounding variable
/// stays frozen, a fresh all-zero offset u per weight tensor is trained with
/// straight-through gradients, and activation steps are trained with the
/// learned-step-size gradient. SGD with momentum and a cosine schedule.
/// Throws StageError unless every weight quantizer is reconstructed.
QatResult qat_finetune(QuantizedModel qm, const data::Dataset& data, const QatOptions& options);

}  // namespace genq::quant
