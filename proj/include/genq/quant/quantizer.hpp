// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "genq/nnkit/tensor.hpp"

namespace genq::quant {

using nn::TensorF;

enum class Role : std::uint8_t { weight = 0, activation = 1 };

/// How integer codes are formed: nearest rounding, learned up/down rounding,
/// or learned rounding plus a finetuned offset.
enum class Stage : std::uint8_t { calibrated = 0, reconstructed = 1, qat_finetuned = 2 };

const char* to_string(Stage stage) noexcept;

/// Ties round away from zero on every platform.
inline double round_half_away(double x) noexcept { return std::round(x); }

/// Largest integer code of an unsigned b-bit grid.
constexpr int upper_bound(int bits) noexcept { return (1 << bits) - 1; }

/// Per-tensor asymmetric uniform quantizer.
struct QuantParam {
  int bits = 4;
  float step = 1.0F;
  int zero_point = 0;
  int lower = 0;
  int upper = 15;
  Stage stage = Stage::calibrated;
  Role role = Role::weight;
  /// Rounding logits; code rounds up where v >= 0.
  std::optional<TensorF> v;
  /// Finetuned offset added as round(u / step).
  std::optional<TensorF> u;

  static QuantParam make(int bits, float step, int zero_point, Role role = Role::weight);

  /// Throws ParameterError for a non-positive step, bits outside 2..8 or a
  /// zero-point outside [lower, upper]; StageError if v/u are inconsistent
  /// with the stage.
  void validate() const;

  /// Representable range [s(n - z), s(p - z)].
  [[nodiscard]] float min_value() const noexcept { return step * static_cast<float>(lower - zero_point); }
  [[nodiscard]] float max_value() const noexcept { return step * static_cast<float>(upper - zero_point); }
};

struct Quantized {
  std::vector<std::int32_t> codes;
  TensorF values;
};

/// Integer codes and dequantized values of w under q. The stage selects
/// nearest rounding, floor plus learned rounding, or additionally the offset u.
Quantized quantize(const TensorF& w, const QuantParam& q);

/// Dequantized values only.
TensorF fake_quantize(const TensorF& w, const QuantParam& q);

/// Rounding logits that make learned rounding reproduce nearest rounding
/// exactly. Magnitudes follow the fractional part so that they also serve as
/// a starting point for optimization.
TensorF nearest_rounding_logits(const TensorF& w, const QuantParam& q);

struct Calibration {
  QuantParam param;
  /// Sum of squared quantization errors at the chosen step.
  double error = 0.0;
};

/// Grid factors applied to the naive step (max - min) / (p - n): (20 + k) / 100
/// for k = 1..100, so 1.0 (the naive step) is one of the candidates.
std::vector<double> step_grid_factors();

/// Picks the step on the grid with the smallest squared error. The range
/// always includes zero. `non_negative` pins the zero-point to the lower bound.
Calibration calibrate_step(std::span<const float> values, int bits, Role role = Role::weight,
                           bool non_negative = false);

/// Sum of squared errors of nearest-rounding quantization with (step, z).
double quantization_error(std::span<const float> values, float step, int zero_point, int lower, int upper);

}  // namespace genq::quant
