// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "genq/datasrc/dataset.hpp"
#include "genq/nnkit/model.hpp"
#include "genq/quant/quant_ops.hpp"

namespace genq::quant {

/// A float model plus one quantizer per weight site and per activation site.
struct QuantizedModel {
  nn::Model base;
  std::vector<QuantParam> weights;
  std::vector<QuantParam> activations;
  /// Diagnostics collected during calibration.
  std::vector<std::string> warnings;

  /// Least advanced stage over all weight quantizers.
  [[nodiscard]] Stage stage() const;

  /// Eval-mode logits with fake-quantized weights and activations.
  [[nodiscard]] TensorF logits(const TensorF& images, nn::Index batch_size = 128) const;

  /// Checks site counts, shapes and every QuantParam.
  void validate() const;
};

/// Weight quantizers fitted by grid search; activation quantizers start at
/// the default step until `calibrate_activations` runs.
QuantizedModel calibrate_weights(const nn::Model& model, int weight_bits, int act_bits);

/// Fits every activation step on activations recorded from the float model.
/// Sites whose recorded activations are all zero keep the default step and
/// add a warning. Large sites are subsampled with a fixed stride.
QuantizedModel calibrate_activations(QuantizedModel qm, const TensorF& calib_images);

/// Largest number of recorded values per site used for the step search.
inline constexpr std::size_t kMaxCalibrationValues = std::size_t{1} << 20;

/// Forward hooks that apply fake quantization.
///
/// By default weights use their quantizer's stage and activations use fixed
/// steps. Weight sites in `weight_override` return the given variable, and
/// activation sites with an entry in `act_steps` use that variable as a
/// learnable step.
class QuantHooks : public nn::ForwardHooks {
 public:
  explicit QuantHooks(const QuantizedModel& qm, bool quantize_weights = true, bool quantize_activations = true);

  Var<float> weight(nn::Tape<float>& tape, std::size_t site, const Var<float>& w) override;
  Var<float> activation(nn::Tape<float>& tape, std::size_t site, const Var<float>& x) override;

  std::map<std::size_t, Var<float>> weight_override;
  std::map<std::size_t, Var<float>> act_steps;
  /// When non-null, the pre-quantization activations of every site are
  /// appended here (indexed by site).
  std::vector<std::vector<float>>* record = nullptr;

 private:
  const QuantizedModel* qm_;
  bool quantize_weights_;
  bool quantize_activations_;
  std::vector<TensorF> dequantized_;
};

/// Top-1 accuracy; throws ContractError on an empty dataset.
double evaluate(const nn::Model& model, const data::Dataset& dataset);
double evaluate(const QuantizedModel& model, const data::Dataset& dataset);

}  // namespace genq::quant
