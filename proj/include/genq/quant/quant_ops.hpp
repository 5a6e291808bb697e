// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "genq/nnkit/tape.hpp"
#include "genq/quant/quantizer.hpp"

namespace genq::quant {

using nn::Var;

/// Rectified sigmoid clip(1.2 sigmoid(v) - 0.1, 0, 1) used to relax rounding.
double rectified_sigmoid(double v) noexcept;

/// Fake quantization of activations with a learnable step (a one-element
/// variable). Straight-through gradient for x inside the clip range; the step
/// receives the learned-step-size gradient multiplied by `grad_scale`.
template <typename Scalar>
Var<Scalar> fake_quant_lsq(const Var<Scalar>& x, const Var<Scalar>& step, const QuantParam& q, Scalar grad_scale);

/// Weights quantized with relaxed rounding: s * (clip(floor(w/s) + h(v) + z, n, p) - z).
/// With `hard` set, h(v) is replaced by the indicator v >= 0 and no gradient flows.
template <typename Scalar>
Var<Scalar> adaround_weight(const Var<Scalar>& w, const Var<Scalar>& v, const QuantParam& q, bool hard);

/// Weights with frozen learned rounding plus an offset u:
/// s * (clip(floor(w/s) + [v >= 0] + round(u/s) + z, n, p) - z).
/// `soft` drops the rounding of u/s (the straight-through surrogate). In both
/// modes the gradient with respect to u is 1 strictly inside (n, p), else 0.
template <typename Scalar>
Var<Scalar> qat_weight(const Var<Scalar>& w, const Var<Scalar>& u, const QuantParam& q, bool soft);

}  // namespace genq::quant
