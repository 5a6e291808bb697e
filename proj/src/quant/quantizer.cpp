// SPDX-License-Identifier: Apache-2.0
#include "genq/quant/quantizer.hpp"

#include <algorithm>
#include <limits>
#include <string>

namespace genq::quant {
namespace {

// Integer code of one element; every quantization path funnels through here
// so that codes agree bitwise across stages and entry points.
inline std::int32_t code_of(float w, const QuantParam& q, std::size_t i) {
  const auto x = static_cast<double>(w / q.step);
  double c = 0;
  if (q.stage == Stage::calibrated) {
    c = round_half_away(x);
  } else {
    c = std::floor(x) + ((*q.v)[static_cast<nn::Index>(i)] >= 0.0F ? 1.0 : 0.0);
    if (q.stage == Stage::qat_finetuned) {
      c += round_half_away(static_cast<double>((*q.u)[static_cast<nn::Index>(i)] / q.step));
    }
  }
  c = std::clamp(c + q.zero_point, static_cast<double>(q.lower), static_cast<double>(q.upper));
  return static_cast<std::int32_t>(c);
}

inline float dequant(std::int32_t code, const QuantParam& q) {
  return q.step * static_cast<float>(code - q.zero_point);
}

void check_payload(const QuantParam& q, const TensorF& w) {
  q.validate();
  if (q.stage != Stage::calibrated && q.v->size() != w.size()) {
    throw DimensionError("rounding variable has " + std::to_string(q.v->size()) + " entries for a tensor of " +
                         std::to_string(w.size()));
  }
  if (q.stage == Stage::qat_finetuned && q.u->size() != w.size()) {
    throw DimensionError("offset variable has " + std::to_string(q.u->size()) + " entries for a tensor of " +
                         std::to_string(w.size()));
  }
}

}  // namespace

const char* to_string(Stage stage) noexcept {
  switch (stage) {
    case Stage::calibrated: return "calibrated";
    case Stage::reconstructed: return "reconstructed";
    case Stage::qat_finetuned: return "qat-finetuned";
  }
  return "unknown";
}

QuantParam QuantParam::make(int bits, float step, int zero_point, Role role) {
  QuantParam q;
  q.bits = bits;
  q.step = step;
  q.zero_point = zero_point;
  q.lower = 0;
  q.upper = bits >= 1 && bits <= 16 ? upper_bound(bits) : 1;
  q.role = role;
  q.validate();
  return q;
}

void QuantParam::validate() const {
  if (!(step > 0.0F) || !std::isfinite(step)) {
    throw ParameterError("quantization step must be positive and finite, got " + std::to_string(step));
  }
  if (bits < 2 || bits > 8) {
    throw ParameterError("bit width " + std::to_string(bits) + " outside 2..8");
  }
  if (lower >= upper) {
    throw ParameterError("integer bounds must satisfy n < p");
  }
  if (zero_point < lower || zero_point > upper) {
    throw ParameterError("zero-point " + std::to_string(zero_point) + " outside [" + std::to_string(lower) + ", " +
                         std::to_string(upper) + "]");
  }
  if (stage != Stage::calibrated && !v) {
    throw StageError(std::string("stage ") + to_string(stage) + " requires a rounding variable");
  }
  if (stage == Stage::qat_finetuned && !u) {
    throw StageError("stage qat-finetuned requires an offset variable");
  }
}

Quantized quantize(const TensorF& w, const QuantParam& q) {
  check_payload(q, w);
  Quantized out;
  out.codes.resize(static_cast<std::size_t>(w.size()));
  out.values = TensorF(w.shape());
  for (std::size_t i = 0; i < out.codes.size(); ++i) {
    out.codes[i] = code_of(w[static_cast<nn::Index>(i)], q, i);
    out.values[static_cast<nn::Index>(i)] = dequant(out.codes[i], q);
  }
  return out;
}

TensorF fake_quantize(const TensorF& w, const QuantParam& q) {
  check_payload(q, w);
  TensorF out(w.shape());
  for (nn::Index i = 0; i < w.size(); ++i) {
    out[i] = dequant(code_of(w[i], q, static_cast<std::size_t>(i)), q);
  }
  return out;
}

TensorF nearest_rounding_logits(const TensorF& w, const QuantParam& q) {
  QuantParam base = q;
  base.stage = Stage::calibrated;
  base.v.reset();
  base.u.reset();
  base.validate();
  TensorF v(w.shape());
  for (nn::Index i = 0; i < w.size(); ++i) {
    const auto x = static_cast<double>(w[i] / q.step);
    const double fl = std::floor(x);
    const bool up = round_half_away(x) > fl;
    // Invert the rectified sigmoid at the fractional part, then force the sign.
    const double rect = (x - fl + 0.1) / 1.2;
    auto logit = static_cast<float>(std::log(rect / (1.0 - rect)));
    if (up && !(logit >= 0.0F)) logit = 1e-4F;
    if (!up && logit >= 0.0F) logit = -1e-4F;
    v[i] = logit;
  }
  return v;
}

std::vector<double> step_grid_factors() {
  std::vector<double> f;
  f.reserve(100);
  for (int k = 1; k <= 100; ++k) f.push_back(static_cast<double>(20 + k) / 100.0);
  return f;
}

double quantization_error(std::span<const float> values, float step, int zero_point, int lower, int upper) {
  double err = 0;
  for (const float w : values) {
    const double c = std::clamp(round_half_away(static_cast<double>(w / step)) + zero_point,
                                static_cast<double>(lower), static_cast<double>(upper));
    const double d = static_cast<double>(step * static_cast<float>(static_cast<int>(c) - zero_point)) - w;
    err += d * d;
  }
  return err;
}

Calibration calibrate_step(std::span<const float> values, int bits, Role role, bool non_negative) {
  if (values.empty()) {
    throw ContractError("calibrate_step: empty tensor");
  }
  Calibration best;
  const int p = upper_bound(bits);
  best.param = QuantParam::make(bits, 1.0F / static_cast<float>(p), 0, role);
  float lo = 0.0F;
  float hi = 0.0F;
  for (const float w : values) {
    if (!std::isfinite(w)) {
      throw ContractError("calibrate_step: non-finite value");
    }
    lo = std::min(lo, w);
    hi = std::max(hi, w);
  }
  if (non_negative) lo = 0.0F;
  if (hi == lo) {
    best.error = quantization_error(values, best.param.step, 0, 0, p);
    return best;
  }
  const double base = (static_cast<double>(hi) - lo) / p;
  best.error = std::numeric_limits<double>::infinity();
  for (const double f : step_grid_factors()) {
    const auto s = static_cast<float>(f * base);
    const int z = non_negative ? 0 : static_cast<int>(std::clamp(-round_half_away(static_cast<double>(lo / s)), 0.0,
                                                                  static_cast<double>(p)));
    const double err = quantization_error(values, s, z, 0, p);
    if (err < best.error) {
      best.error = err;
      best.param.step = s;
      best.param.zero_point = z;
    }
  }
  return best;
}

}  // namespace genq::quant
