// SPDX-License-Identifier: Apache-2.0
#include "genq/quant/quantized_model.hpp"

#include <algorithm>
#include <cmath>

#include "genq/nnkit/train.hpp"

namespace genq::quant {

Stage QuantizedModel::stage() const {
  Stage s = Stage::qat_finetuned;
  for (const auto& q : weights) s = std::min(s, q.stage);
  return weights.empty() ? Stage::calibrated : s;
}

void QuantizedModel::validate() const {
  const auto& sites = base.weight_sites();
  if (weights.size() != sites.size() || activations.size() != base.activation_sites().size()) {
    throw ContractError("quantized model: quantizer count does not match the model's sites");
  }
  for (std::size_t i = 0; i < sites.size(); ++i) {
    weights[i].validate();
    const auto& w = base.parameters()[sites[i].parameter].value;
    if (weights[i].v && weights[i].v->shape() != w.shape()) {
      throw DimensionError("rounding variable shape mismatch at weight site " + std::to_string(i));
    }
    if (weights[i].u && weights[i].u->shape() != w.shape()) {
      throw DimensionError("offset variable shape mismatch at weight site " + std::to_string(i));
    }
  }
  for (const auto& a : activations) a.validate();
}

TensorF QuantizedModel::logits(const TensorF& images, nn::Index batch_size) const {
  nn::Model model = base;
  model.set_trainable(false);
  QuantHooks hooks(*this);
  nn::ForwardContext ctx;
  ctx.hooks = &hooks;
  std::vector<TensorF> parts;
  for (nn::Index first = 0; first < images.dim(0); first += batch_size) {
    nn::Tape<float> tape;
    tape.set_grad_enabled(false);
    const nn::Index count = std::min(batch_size, images.dim(0) - first);
    parts.push_back(model.forward(tape, images.slice(first, count), ctx).value());
  }
  return nn::concat_rows<float>(parts);
}

QuantHooks::QuantHooks(const QuantizedModel& qm, bool quantize_weights, bool quantize_activations)
    : qm_(&qm), quantize_weights_(quantize_weights), quantize_activations_(quantize_activations) {
  if (quantize_weights_) {
    const auto& sites = qm.base.weight_sites();
    dequantized_.reserve(sites.size());
    for (std::size_t i = 0; i < sites.size(); ++i) {
      dequantized_.push_back(fake_quantize(qm.base.parameters()[sites[i].parameter].value, qm.weights[i]));
    }
  }
}

Var<float> QuantHooks::weight(nn::Tape<float>& tape, std::size_t site, const Var<float>& w) {
  if (const auto it = weight_override.find(site); it != weight_override.end()) {
    return it->second;
  }
  return quantize_weights_ ? tape.constant(dequantized_[site]) : w;
}

Var<float> QuantHooks::activation(nn::Tape<float>& tape, std::size_t site, const Var<float>& x) {
  if (record != nullptr) {
    if (record->size() < qm_->activations.size()) record->resize(qm_->activations.size());
    auto& dst = (*record)[site];
    dst.insert(dst.end(), x.value().data().begin(), x.value().data().end());
  }
  if (!quantize_activations_) {
    return x;
  }
  const QuantParam& q = qm_->activations[site];
  if (const auto it = act_steps.find(site); it != act_steps.end()) {
    const nn::Index per_sample = x.value().size() / std::max<nn::Index>(1, x.value().dim(0));
    const auto scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(per_sample) * q.upper));
    return fake_quant_lsq(x, it->second, q, scale);
  }
  return fake_quant_lsq(x, tape.constant(TensorF::scalar(q.step)), q, 1.0F);
}

QuantizedModel calibrate_weights(const nn::Model& model, int weight_bits, int act_bits) {
  QuantizedModel qm{model, {}, {}, {}};
  for (const auto& site : model.weight_sites()) {
    qm.weights.push_back(calibrate_step(model.parameters()[site.parameter].value.data(), weight_bits).param);
  }
  const int p = upper_bound(act_bits);
  for (std::size_t i = 0; i < model.activation_sites().size(); ++i) {
    qm.activations.push_back(QuantParam::make(act_bits, 1.0F / static_cast<float>(p), 0, Role::activation));
  }
  return qm;
}

QuantizedModel calibrate_activations(QuantizedModel qm, const TensorF& calib_images) {
  if (calib_images.rank() == 0 || calib_images.dim(0) == 0) {
    throw ContractError("calibrate_activations: empty calibration set");
  }
  std::vector<std::vector<float>> recorded(qm.activations.size());
  {
    nn::Model model = qm.base;
    model.set_trainable(false);
    QuantHooks hooks(qm, false, false);
    hooks.record = &recorded;
    nn::ForwardContext ctx;
    ctx.hooks = &hooks;
    for (nn::Index first = 0; first < calib_images.dim(0); first += 128) {
      nn::Tape<float> tape;
      tape.set_grad_enabled(false);
      (void)model.forward(tape, calib_images.slice(first, std::min<nn::Index>(128, calib_images.dim(0) - first)), ctx);
    }
  }
  const auto& sites = qm.base.activation_sites();
  for (std::size_t i = 0; i < sites.size(); ++i) {
    std::vector<float>& values = recorded[i];
    if (values.size() > kMaxCalibrationValues) {
      const std::size_t stride = (values.size() + kMaxCalibrationValues - 1) / kMaxCalibrationValues;
      std::size_t k = 0;
      for (std::size_t j = 0; j < values.size(); j += stride) values[k++] = values[j];
      values.resize(k);
    }
    const int bits = qm.activations[i].bits;
    const bool all_zero = std::all_of(values.begin(), values.end(), [](float v) { return v == 0.0F; });
    if (values.empty() || all_zero) {
      qm.activations[i] = QuantParam::make(bits, 1.0F / static_cast<float>(upper_bound(bits)), 0, Role::activation);
      qm.warnings.push_back("activation site '" + sites[i].name +
                            "' was never activated by the calibration data; keeping the default step");
      continue;
    }
    qm.activations[i] = calibrate_step(values, bits, Role::activation, sites[i].non_negative).param;
  }
  return qm;
}

namespace {

double accuracy_of(const TensorF& logits, const data::Dataset& dataset) {
  return nn::top1_accuracy(logits, dataset.labels);
}

void require_nonempty(const data::Dataset& dataset) {
  if (dataset.labels.empty()) {
    throw ContractError("evaluate: empty dataset");
  }
}

}  // namespace

double evaluate(const nn::Model& model, const data::Dataset& dataset) {
  require_nonempty(dataset);
  return accuracy_of(model.logits(dataset.images), dataset);
}

double evaluate(const QuantizedModel& model, const data::Dataset& dataset) {
  require_nonempty(dataset);
  return accuracy_of(model.logits(dataset.images), dataset);
}

}  // namespace genq::quant
