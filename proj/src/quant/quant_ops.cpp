// SPDX-License-Identifier: Apache-2.0
#include "genq/quant/quant_ops.hpp"

#include <algorithm>
#include <cmath>

namespace genq::quant {

using nn::Index;
using nn::Tape;
using nn::Tensor;

double rectified_sigmoid(double v) noexcept {
  return std::clamp(1.2 / (1.0 + std::exp(-v)) - 0.1, 0.0, 1.0);
}

template <typename Scalar>
Var<Scalar> fake_quant_lsq(const Var<Scalar>& x, const Var<Scalar>& step, const QuantParam& q, Scalar grad_scale) {
  if (step.value().size() != 1) {
    throw ContractError("fake_quant_lsq: step must hold one value");
  }
  const Scalar s = step.value()[0];
  if (!(s > Scalar{0})) {
    throw ParameterError("fake_quant_lsq: non-positive step");
  }
  const auto lo = static_cast<double>(q.lower);
  const auto hi = static_cast<double>(q.upper);
  const Tensor<Scalar>& xv = x.value();
  Tensor<Scalar> out(xv.shape());
  for (Index i = 0; i < xv.size(); ++i) {
    const auto r = round_half_away(static_cast<double>(xv[i] / s));
    const auto c = static_cast<int>(std::clamp(r + q.zero_point, lo, hi));
    out[i] = s * static_cast<Scalar>(c - q.zero_point);
  }
  Tape<Scalar>& tape = *x.tape();
  return tape.record(std::move(out), {x, step}, [x, step, q, s, grad_scale](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto* gx = t.grad_sink(x);
    auto* gs = t.grad_sink(step);
    const Tensor<Scalar>& xv = x.value();
    double acc = 0;
    for (Index i = 0; i < xv.size(); ++i) {
      const Scalar ratio = xv[i] / s;
      const double t_cont = static_cast<double>(ratio) + q.zero_point;
      if (t_cont < q.lower) {
        acc += static_cast<double>(g[i]) * (q.lower - q.zero_point);
      } else if (t_cont > q.upper) {
        acc += static_cast<double>(g[i]) * (q.upper - q.zero_point);
      } else {
        if (gx) (*gx)[i] += g[i];
        acc += static_cast<double>(g[i]) * (round_half_away(static_cast<double>(ratio)) - static_cast<double>(ratio));
      }
    }
    if (gs) (*gs)[0] += static_cast<Scalar>(acc) * grad_scale;
  });
}

template <typename Scalar>
Var<Scalar> adaround_weight(const Var<Scalar>& w, const Var<Scalar>& v, const QuantParam& q, bool hard) {
  const Tensor<Scalar>& wv = w.value();
  const Tensor<Scalar>& vv = v.value();
  if (wv.shape() != vv.shape()) {
    throw DimensionError("adaround_weight: rounding variable " + nn::to_string(vv.shape()) + " vs weight " +
                         nn::to_string(wv.shape()));
  }
  const auto s = static_cast<Scalar>(q.step);
  const auto lo = static_cast<double>(q.lower);
  const auto hi = static_cast<double>(q.upper);
  Tensor<Scalar> out(wv.shape());
  for (Index i = 0; i < wv.size(); ++i) {
    const double fl = std::floor(static_cast<double>(wv[i] / s));
    if (hard) {
      const double c = std::clamp(fl + (vv[i] >= Scalar{0} ? 1.0 : 0.0) + q.zero_point, lo, hi);
      out[i] = s * static_cast<Scalar>(static_cast<int>(c) - q.zero_point);
    } else {
      const double c = std::clamp(fl + rectified_sigmoid(static_cast<double>(vv[i])) + q.zero_point, lo, hi);
      out[i] = s * static_cast<Scalar>(c - q.zero_point);
    }
  }
  Tape<Scalar>& tape = *w.tape();
  if (hard) {
    return tape.constant(std::move(out));
  }
  return tape.record(std::move(out), {w, v}, [w, v, q, s](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto* gv = t.grad_sink(v);
    if (!gv) return;
    const Tensor<Scalar>& wv = w.value();
    const Tensor<Scalar>& vv = v.value();
    for (Index i = 0; i < wv.size(); ++i) {
      const double sig = 1.0 / (1.0 + std::exp(-static_cast<double>(vv[i])));
      const double rect = 1.2 * sig - 0.1;
      if (rect <= 0.0 || rect >= 1.0) continue;
      const double tcont = std::floor(static_cast<double>(wv[i] / s)) + rect + q.zero_point;
      if (tcont <= q.lower || tcont >= q.upper) continue;
      (*gv)[i] += g[i] * s * static_cast<Scalar>(1.2 * sig * (1.0 - sig));
    }
  });
}

template <typename Scalar>
Var<Scalar> qat_weight(const Var<Scalar>& w, const Var<Scalar>& u, const QuantParam& q, bool soft) {
  const Tensor<Scalar>& wv = w.value();
  const Tensor<Scalar>& uv = u.value();
  if (!q.v || q.v->size() != wv.size() || uv.size() != wv.size()) {
    throw DimensionError("qat_weight: rounding and offset variables must match the weight " +
                         nn::to_string(wv.shape()));
  }
  const auto s = static_cast<Scalar>(q.step);
  const auto lo = static_cast<double>(q.lower);
  const auto hi = static_cast<double>(q.upper);
  Tensor<Scalar> out(wv.shape());
  // Continuous pre-clip code, shared by the forward value and the gradient mask.
  const auto pre_clip = [zp = q.zero_point, s](Scalar wi, float vi, Scalar ui) {
    return std::floor(static_cast<double>(wi / s)) + (vi >= 0.0F ? 1.0 : 0.0) + static_cast<double>(ui / s) + zp;
  };
  for (Index i = 0; i < wv.size(); ++i) {
    if (soft) {
      const double c = std::clamp(pre_clip(wv[i], (*q.v)[i], uv[i]), lo, hi);
      out[i] = s * static_cast<Scalar>(c - q.zero_point);
    } else {
      const double base = std::floor(static_cast<double>(wv[i] / s)) + ((*q.v)[i] >= 0.0F ? 1.0 : 0.0);
      const double c = std::clamp(base + round_half_away(static_cast<double>(uv[i] / s)) + q.zero_point, lo, hi);
      out[i] = s * static_cast<Scalar>(static_cast<int>(c) - q.zero_point);
    }
  }
  Tape<Scalar>& tape = *w.tape();
  return tape.record(std::move(out), {w, u}, [w, u, q, pre_clip](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto* gu = t.grad_sink(u);
    if (!gu) return;
    const Tensor<Scalar>& wv = w.value();
    const Tensor<Scalar>& uv = u.value();
    for (Index i = 0; i < wv.size(); ++i) {
      const double tc = pre_clip(wv[i], (*q.v)[i], uv[i]);
      if (tc > q.lower && tc < q.upper) (*gu)[i] += g[i];
    }
  });
}

#define GENQ_INSTANTIATE_QUANT_OPS(S)                                                          \
  template Var<S> fake_quant_lsq(const Var<S>&, const Var<S>&, const QuantParam&, S);          \
  template Var<S> adaround_weight(const Var<S>&, const Var<S>&, const QuantParam&, bool);      \
  template Var<S> qat_weight(const Var<S>&, const Var<S>&, const QuantParam&, bool);

GENQ_INSTANTIATE_QUANT_OPS(float)
GENQ_INSTANTIATE_QUANT_OPS(double)

#undef GENQ_INSTANTIATE_QUANT_OPS

}  // namespace genq::quant
