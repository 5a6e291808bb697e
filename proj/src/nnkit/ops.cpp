// SPDX-License-Identifier: Apache-2.0
#include "genq/nnkit/ops.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace genq::nn {
namespace {

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

template <typename Scalar>
void require_rank(const Var<Scalar>& x, Index rank, const char* op) {
  if (x.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(x.shape()));
  }
}

template <typename Scalar>
Tape<Scalar>& tape_of(const Var<Scalar>& a) {
  if (!a.valid()) {
    throw ContractError("operation on an unbound variable");
  }
  return *a.tape();
}

/// im2col for one image: src [C x H x W] -> cols [(C*k*k) x (Ho*Wo)].
template <typename Scalar>
void im2col(const Scalar* src, Index channels, Index height, Index width, Index kernel, Index stride,
            Index pad, Index out_h, Index out_w, Scalar* cols) {
  Index row = 0;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < kernel; ++ky) {
      for (Index kx = 0; kx < kernel; ++kx, ++row) {
        Scalar* dst = cols + row * out_h * out_w;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kx;
            dst[oy * out_w + ox] = (iy >= 0 && iy < height && ix >= 0 && ix < width)
                                       ? src[(c * height + iy) * width + ix]
                                       : Scalar{0};
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* cols, Index channels, Index height, Index width, Index kernel, Index stride,
                Index pad, Index out_h, Index out_w, Scalar* dst) {
  Index row = 0;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < kernel; ++ky) {
      for (Index kx = 0; kx < kernel; ++kx, ++row) {
        const Scalar* src = cols + row * out_h * out_w;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) {
            continue;
          }
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < width) {
              dst[(c * height + iy) * width + ix] += src[oy * out_w + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "add");
  Tensor<Scalar> out = a.value();
  out.vector() += b.value().vector();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (auto* ga = t.grad_sink(a)) ga->vector() += g.vector();
    if (auto* gb = t.grad_sink(b)) gb->vector() += g.vector();
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "sub");
  Tensor<Scalar> out = a.value();
  out.vector() -= b.value().vector();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (auto* ga = t.grad_sink(a)) ga->vector() += g.vector();
    if (auto* gb = t.grad_sink(b)) gb->vector() -= g.vector();
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "mul");
  Tensor<Scalar> out = a.value();
  out.vector().array() *= b.value().vector().array();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (auto* ga = t.grad_sink(a)) ga->vector().array() += g.vector().array() * b.value().vector().array();
    if (auto* gb = t.grad_sink(b)) gb->vector().array() += g.vector().array() * a.value().vector().array();
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out = a.value();
  out.vector() *= factor;
  return tape_of(a).record(std::move(out), {a}, [a, factor](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (auto* ga = t.grad_sink(a)) ga->vector() += factor * g.vector();
  });
}

template <typename Scalar>
Var<Scalar> add_broadcast(const Var<Scalar>& x, const Var<Scalar>& y) {
  const Shape& xs = x.shape();
  const Shape& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.begin(), ys.end(), xs.end() - static_cast<std::ptrdiff_t>(ys.size()))) {
    throw DimensionError("add_broadcast: " + to_string(ys) + " is not a suffix of " + to_string(xs));
  }
  const Index inner = y.value().size();
  const Index outer = inner == 0 ? 0 : x.value().size() / inner;
  Tensor<Scalar> out = x.value();
  out.matrix(outer, inner).rowwise() += y.value().matrix(1, inner).row(0);
  return tape_of(x).record(std::move(out), {x, y}, [x, y, outer, inner](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (auto* gx = t.grad_sink(x)) gx->vector() += g.vector();
    if (auto* gy = t.grad_sink(y)) gy->matrix(1, inner) += g.matrix(outer, inner).colwise().sum();
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Tensor<Scalar> out = x.value().reshaped(std::move(shape));
  return tape_of(x).record(std::move(out), {x}, [x](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (auto* gx = t.grad_sink(x)) gx->vector() += g.vector();
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Tensor<Scalar> out = Tensor<Scalar>::scalar(x.value().vector().sum());
  return tape_of(x).record(std::move(out), {x}, [x](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (auto* gx = t.grad_sink(x)) gx->vector().array() += g[0];
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  const Index n = x.value().size();
  if (n == 0) {
    throw ContractError("mean of an empty tensor");
  }
  Tensor<Scalar> out = Tensor<Scalar>::scalar(x.value().vector().sum() / static_cast<Scalar>(n));
  return tape_of(x).record(std::move(out), {x}, [x, n](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (auto* gx = t.grad_sink(x)) gx->vector().array() += g[0] / static_cast<Scalar>(n);
  });
}

template <typename Scalar>
Var<Scalar> mse(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "mse");
  const Index n = a.value().size();
  if (n == 0) {
    throw ContractError("mse of empty tensors");
  }
  const auto diff = (a.value().vector() - b.value().vector()).eval();
  Tensor<Scalar> out = Tensor<Scalar>::scalar(diff.squaredNorm() / static_cast<Scalar>(n));
  return tape_of(a).record(std::move(out), {a, b}, [a, b, n](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto d = ((a.value().vector() - b.value().vector()) * (Scalar(2) * g[0] / static_cast<Scalar>(n))).eval();
    if (auto* ga = t.grad_sink(a)) ga->vector() += d;
    if (auto* gb = t.grad_sink(b)) gb->vector() -= d;
  });
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const Index m = a.value().dim(0);
  const Index k = a.value().dim(1);
  const Index n = b.value().dim(1);
  if (b.value().dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + to_string(a.shape()) + " . " +
                         to_string(b.shape()));
  }
  Tensor<Scalar> out(Shape{m, n});
  out.matrix(m, n).noalias() = a.value().matrix(m, k) * b.value().matrix(k, n);
  return tape_of(a).record(std::move(out), {a, b}, [a, b, m, k, n](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto gm = g.matrix(m, n);
    if (auto* ga = t.grad_sink(a)) ga->matrix(m, k).noalias() += gm * b.value().matrix(k, n).transpose();
    if (auto* gb = t.grad_sink(b)) gb->matrix(k, n).noalias() += a.value().matrix(m, k).transpose() * gm;
  });
}

template <typename Scalar>
Var<Scalar> bmm(const Var<Scalar>& a, const Var<Scalar>& b, bool transpose_b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const Index groups = a.value().dim(0);
  const Index m = a.value().dim(1);
  const Index k = a.value().dim(2);
  const Index n = transpose_b ? b.value().dim(1) : b.value().dim(2);
  const Index bk = transpose_b ? b.value().dim(2) : b.value().dim(1);
  if (b.value().dim(0) != groups || bk != k) {
    throw DimensionError("bmm: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  Tensor<Scalar> out(Shape{groups, m, n});
  const Index bs = k * n;
  for (Index gi = 0; gi < groups; ++gi) {
    ConstMatrixMap<Scalar> am(a.value().data().data() + gi * m * k, m, k);
    MatrixMap<Scalar> om(out.data().data() + gi * m * n, m, n);
    if (transpose_b) {
      ConstMatrixMap<Scalar> bm(b.value().data().data() + gi * bs, n, k);
      om.noalias() = am * bm.transpose();
    } else {
      ConstMatrixMap<Scalar> bm(b.value().data().data() + gi * bs, k, n);
      om.noalias() = am * bm;
    }
  }
  return tape_of(a).record(std::move(out), {a, b},
                           [a, b, groups, m, k, n, transpose_b](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto* ga = t.grad_sink(a);
    auto* gb = t.grad_sink(b);
    for (Index gi = 0; gi < groups; ++gi) {
      ConstMatrixMap<Scalar> gm(g.data().data() + gi * m * n, m, n);
      ConstMatrixMap<Scalar> am(a.value().data().data() + gi * m * k, m, k);
      if (transpose_b) {
        ConstMatrixMap<Scalar> bm(b.value().data().data() + gi * k * n, n, k);
        if (ga) MatrixMap<Scalar>(ga->data().data() + gi * m * k, m, k).noalias() += gm * bm;
        if (gb) MatrixMap<Scalar>(gb->data().data() + gi * k * n, n, k).noalias() += gm.transpose() * am;
      } else {
        ConstMatrixMap<Scalar> bm(b.value().data().data() + gi * k * n, k, n);
        if (ga) MatrixMap<Scalar>(ga->data().data() + gi * m * k, m, k).noalias() += gm * bm.transpose();
        if (gb) MatrixMap<Scalar>(gb->data().data() + gi * k * n, k, n).noalias() += am.transpose() * gm;
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const std::optional<Var<Scalar>>& bias) {
  require_rank(weight, 2, "linear");
  const Index out_features = weight.value().dim(0);
  const Index in_features = weight.value().dim(1);
  if (x.value().rank() < 1 || x.value().dim(-1) != in_features) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " does not match weight " +
                         to_string(weight.shape()));
  }
  if (bias && bias->shape() != Shape{out_features}) {
    throw DimensionError("linear: bias " + to_string(bias->shape()) + " does not match weight " +
                         to_string(weight.shape()));
  }
  const Index rows = x.value().size() / in_features;
  Shape out_shape = x.shape();
  out_shape.back() = out_features;
  Tensor<Scalar> out(out_shape);
  auto om = out.matrix(rows, out_features);
  om.noalias() = x.value().matrix(rows, in_features) * weight.value().matrix(out_features, in_features).transpose();
  if (bias) {
    om.rowwise() += bias->value().matrix(1, out_features).row(0);
  }
  const Var<Scalar> b = bias.value_or(Var<Scalar>());
  auto backward = [x, weight, b, rows, in_features, out_features](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto gm = g.matrix(rows, out_features);
    if (auto* gx = t.grad_sink(x)) {
      gx->matrix(rows, in_features).noalias() += gm * weight.value().matrix(out_features, in_features);
    }
    if (auto* gw = t.grad_sink(weight)) {
      gw->matrix(out_features, in_features).noalias() += gm.transpose() * x.value().matrix(rows, in_features);
    }
    if (b.valid()) {
      if (auto* gb = t.grad_sink(b)) gb->matrix(1, out_features) += gm.colwise().sum();
    }
  };
  if (bias) {
    return tape_of(x).record(std::move(out), {x, weight, *bias}, std::move(backward));
  }
  return tape_of(x).record(std::move(out), {x, weight}, std::move(backward));
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const std::optional<Var<Scalar>>& bias,
                   Conv2dOptions options) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  const Index batch = x.value().dim(0);
  const Index channels = x.value().dim(1);
  const Index height = x.value().dim(2);
  const Index width = x.value().dim(3);
  const Index out_channels = weight.value().dim(0);
  const Index kernel = weight.value().dim(2);
  if (weight.value().dim(1) != channels || weight.value().dim(3) != kernel) {
    throw DimensionError("conv2d: input " + to_string(x.shape()) + " does not match weight " +
                         to_string(weight.shape()));
  }
  if (bias && bias->shape() != Shape{out_channels}) {
    throw DimensionError("conv2d: bias " + to_string(bias->shape()) + " does not match weight " +
                         to_string(weight.shape()));
  }
  const Index stride = options.stride;
  const Index pad = options.padding;
  if (stride < 1 || pad < 0) {
    throw ContractError("conv2d: stride must be >= 1 and padding >= 0");
  }
  const Index out_h = (height + 2 * pad - kernel) / stride + 1;
  const Index out_w = (width + 2 * pad - kernel) / stride + 1;
  if (out_h < 1 || out_w < 1) {
    throw DimensionError("conv2d: kernel larger than padded input " + to_string(x.shape()));
  }
  const Index patch = channels * kernel * kernel;
  const Index pixels = out_h * out_w;

  Tensor<Scalar> out(Shape{batch, out_channels, out_h, out_w});
  RowMatrix<Scalar> cols(patch, pixels);
  const auto wm = weight.value().matrix(out_channels, patch);
  for (Index b = 0; b < batch; ++b) {
    im2col(x.value().data().data() + b * channels * height * width, channels, height, width, kernel, stride, pad,
           out_h, out_w, cols.data());
    MatrixMap<Scalar> om(out.data().data() + b * out_channels * pixels, out_channels, pixels);
    om.noalias() = wm * cols;
    if (bias) {
      om.colwise() += bias->value().vector();
    }
  }

  const Var<Scalar> bv = bias.value_or(Var<Scalar>());
  auto backward = [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto* gx = t.grad_sink(x);
    auto* gw = t.grad_sink(weight);
    Tensor<Scalar>* gb = bv.valid() ? t.grad_sink(bv) : nullptr;
    RowMatrix<Scalar> cols_b(patch, pixels);
    RowMatrix<Scalar> dcols(patch, pixels);
    const auto w = weight.value().matrix(out_channels, patch);
    for (Index b = 0; b < batch; ++b) {
      ConstMatrixMap<Scalar> gm(g.data().data() + b * out_channels * pixels, out_channels, pixels);
      if (gw) {
        im2col(x.value().data().data() + b * channels * height * width, channels, height, width, kernel, stride,
               pad, out_h, out_w, cols_b.data());
        gw->matrix(out_channels, patch).noalias() += gm * cols_b.transpose();
      }
      if (gx) {
        dcols.noalias() = w.transpose() * gm;
        col2im_add(dcols.data(), channels, height, width, kernel, stride, pad, out_h, out_w,
                   gx->data().data() + b * channels * height * width);
      }
      if (gb) {
        gb->vector() += gm.rowwise().sum();
      }
    }
  };
  if (bias) {
    return tape_of(x).record(std::move(out), {x, weight, *bias}, std::move(backward));
  }
  return tape_of(x).record(std::move(out), {x, weight}, std::move(backward));
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> out = x.value();
  out.vector() = out.vector().cwiseMax(Scalar{0});
  return tape_of(x).record(std::move(out), {x}, [x](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (auto* gx = t.grad_sink(x)) {
      gx->vector().array() += (x.value().vector().array() > Scalar{0}).select(g.vector().array(), Scalar{0});
    }
  });
}

template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  Tensor<Scalar> out = x.value();
  for (auto& v : out.data()) {
    v = Scalar(0.5) * v * (Scalar{1} + std::erf(v * Scalar(std::numbers::sqrt2 / 2)));
  }
  return tape_of(x).record(std::move(out), {x}, [x](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto* gx = t.grad_sink(x);
    if (!gx) return;
    const Scalar inv_sqrt_2pi = Scalar(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    const auto xs = x.value().data();
    for (Index i = 0; i < x.value().size(); ++i) {
      const Scalar v = xs[static_cast<std::size_t>(i)];
      const Scalar cdf = Scalar(0.5) * (Scalar{1} + std::erf(v * Scalar(std::numbers::sqrt2 / 2)));
      const Scalar pdf = inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
      (*gx)[i] += g[i] * (cdf + v * pdf);
    }
  });
}

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x) {
  if (x.value().rank() < 1) {
    throw DimensionError("softmax of a rank-0 tensor");
  }
  const Index cols = x.value().dim(-1);
  const Index rows = x.value().size() / cols;
  Tensor<Scalar> out = x.value();
  auto om = out.matrix(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    auto row = om.row(r);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  Tensor<Scalar> probs = out;
  return tape_of(x).record(std::move(out), {x}, [x, probs = std::move(probs), rows, cols](Tape<Scalar>& t,
                                                                                         const Tensor<Scalar>& g) {
    auto* gx = t.grad_sink(x);
    if (!gx) return;
    const auto ym = probs.matrix(rows, cols);
    const auto gm = g.matrix(rows, cols);
    auto gxm = gx->matrix(rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const Scalar dot = gm.row(r).dot(ym.row(r));
      gxm.row(r).array() += ym.row(r).array() * (gm.row(r).array() - dot);
    }
  });
}

template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const Index batch = logits.value().dim(0);
  const Index classes = logits.value().dim(1);
  if (static_cast<Index>(labels.size()) != batch || batch == 0) {
    throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                        std::to_string(batch));
  }
  RowMatrix<Scalar> probs(batch, classes);
  Scalar total{0};
  const auto lm = logits.value().matrix(batch, classes);
  std::vector<int> targets(labels.begin(), labels.end());
  for (Index b = 0; b < batch; ++b) {
    const int y = targets[static_cast<std::size_t>(b)];
    if (y < 0 || y >= classes) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) +
                          ")");
    }
    const Scalar mx = lm.row(b).maxCoeff();
    probs.row(b) = (lm.row(b).array() - mx).exp();
    const Scalar z = probs.row(b).sum();
    probs.row(b) /= z;
    total += std::log(z) + mx - lm(b, y);
  }
  Tensor<Scalar> out = Tensor<Scalar>::scalar(total / static_cast<Scalar>(batch));
  return tape_of(logits).record(std::move(out), {logits},
                                [logits, probs = std::move(probs), targets = std::move(targets), batch,
                                 classes](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto* gl = t.grad_sink(logits);
    if (!gl) return;
    auto gm = gl->matrix(batch, classes);
    const Scalar w = g[0] / static_cast<Scalar>(batch);
    for (Index b = 0; b < batch; ++b) {
      gm.row(b) += w * probs.row(b);
      gm(b, targets[static_cast<std::size_t>(b)]) -= w;
    }
  });
}

template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps) {
  const Index dim = x.value().dim(-1);
  if (gamma.shape() != Shape{dim} || beta.shape() != Shape{dim}) {
    throw DimensionError("layer_norm: affine parameters do not match " + to_string(x.shape()));
  }
  const Index rows = x.value().size() / dim;
  Tensor<Scalar> xhat(x.shape());
  std::vector<Scalar> inv_std(static_cast<std::size_t>(rows));
  const auto xm = x.value().matrix(rows, dim);
  auto hm = xhat.matrix(rows, dim);
  for (Index r = 0; r < rows; ++r) {
    const Scalar mu = xm.row(r).mean();
    const Scalar var = (xm.row(r).array() - mu).square().mean();
    const Scalar is = Scalar{1} / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    hm.row(r) = (xm.row(r).array() - mu) * is;
  }
  Tensor<Scalar> out(x.shape());
  out.matrix(rows, dim) = (hm.array().rowwise() * gamma.value().matrix(1, dim).row(0).array()).rowwise() +
                          beta.value().matrix(1, dim).row(0).array();
  return tape_of(x).record(std::move(out), {x, gamma, beta},
                           [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                            dim](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto gm = g.matrix(rows, dim);
    const auto hm = xhat.matrix(rows, dim);
    if (auto* gg = t.grad_sink(gamma)) gg->matrix(1, dim) += (gm.array() * hm.array()).colwise().sum().matrix();
    if (auto* gb = t.grad_sink(beta)) gb->matrix(1, dim) += gm.colwise().sum();
    if (auto* gx = t.grad_sink(x)) {
      auto gxm = gx->matrix(rows, dim);
      const auto gam = gamma.value().matrix(1, dim).row(0).array();
      for (Index r = 0; r < rows; ++r) {
        const auto dh = (gm.row(r).array() * gam).eval();
        const Scalar s1 = dh.sum();
        const Scalar s2 = (dh * hm.row(r).array()).sum();
        gxm.row(r).array() +=
            (inv_std[static_cast<std::size_t>(r)] / static_cast<Scalar>(dim)) *
            (static_cast<Scalar>(dim) * dh - s1 - hm.row(r).array() * s2);
      }
    }
  });
}

template <typename Scalar>
BatchStats channel_stats(const Tensor<Scalar>& x) {
  if (x.rank() != 4) {
    throw DimensionError("channel_stats: expected [B x C x H x W], got " + to_string(x.shape()));
  }
  const Index batch = x.dim(0);
  const Index channels = x.dim(1);
  const Index pixels = x.dim(2) * x.dim(3);
  const double count = static_cast<double>(batch * pixels);
  BatchStats stats{std::vector<double>(static_cast<std::size_t>(channels), 0.0),
                   std::vector<double>(static_cast<std::size_t>(channels), 0.0)};
  for (Index c = 0; c < channels; ++c) {
    double s = 0.0;
    for (Index b = 0; b < batch; ++b) {
      const Scalar* p = x.data().data() + (b * channels + c) * pixels;
      for (Index i = 0; i < pixels; ++i) s += static_cast<double>(p[i]);
    }
    const double mu = s / count;
    double ss = 0.0;
    for (Index b = 0; b < batch; ++b) {
      const Scalar* p = x.data().data() + (b * channels + c) * pixels;
      for (Index i = 0; i < pixels; ++i) {
        const double d = static_cast<double>(p[i]) - mu;
        ss += d * d;
      }
    }
    stats.mean[static_cast<std::size_t>(c)] = mu;
    stats.stddev[static_cast<std::size_t>(c)] = std::sqrt(ss / count);
  }
  return stats;
}

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       BatchNormState<Scalar>& state, BatchNormMode mode, bool update_running,
                       BatchStats* observed) {
  require_rank(x, 4, "batch_norm");
  const Index batch = x.value().dim(0);
  const Index channels = x.value().dim(1);
  const Index pixels = x.value().dim(2) * x.value().dim(3);
  if (state.running_mean.size() != channels || gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
    throw DimensionError("batch_norm: layer has " + std::to_string(state.running_mean.size()) +
                         " channels, input " + to_string(x.shape()));
  }
  if (batch < 1) {
    throw ContractError("batch_norm: empty batch");
  }
  const Index count = batch * pixels;
  if (mode == BatchNormMode::train && count < 2) {
    throw ContractError("batch_norm: train mode needs at least two values per channel");
  }

  const BatchStats stats = (mode == BatchNormMode::train || observed) ? channel_stats(x.value()) : BatchStats{};
  if (observed) {
    *observed = stats;
  }

  std::vector<Scalar> shift(static_cast<std::size_t>(channels));
  std::vector<Scalar> inv_std(static_cast<std::size_t>(channels));
  for (Index c = 0; c < channels; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    if (mode == BatchNormMode::train) {
      const double var = stats.stddev[ci] * stats.stddev[ci];
      shift[ci] = static_cast<Scalar>(stats.mean[ci]);
      inv_std[ci] = static_cast<Scalar>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
      if (update_running) {
        const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
        state.running_mean[c] = (Scalar{1} - state.momentum) * state.running_mean[c] +
                                state.momentum * static_cast<Scalar>(stats.mean[ci]);
        state.running_var[c] =
            (Scalar{1} - state.momentum) * state.running_var[c] + state.momentum * static_cast<Scalar>(unbiased);
      }
    } else {
      shift[ci] = state.running_mean[c];
      inv_std[ci] = Scalar{1} / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  Tensor<Scalar> xhat(x.shape());
  Tensor<Scalar> out(x.shape());
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < channels; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const Index base = (b * channels + c) * pixels;
      const Scalar gm = gamma.value()[c];
      const Scalar bt = beta.value()[c];
      for (Index i = 0; i < pixels; ++i) {
        const Scalar h = (x.value()[base + i] - shift[ci]) * inv_std[ci];
        xhat[base + i] = h;
        out[base + i] = gm * h + bt;
      }
    }
  }

  const bool train = mode == BatchNormMode::train;
  return tape_of(x).record(std::move(out), {x, gamma, beta},
                           [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), batch, channels,
                            pixels, count, train](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto* gx = t.grad_sink(x);
    auto* gg = t.grad_sink(gamma);
    auto* gb = t.grad_sink(beta);
    for (Index c = 0; c < channels; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      double sum_g = 0.0;
      double sum_gh = 0.0;
      for (Index b = 0; b < batch; ++b) {
        const Index base = (b * channels + c) * pixels;
        for (Index i = 0; i < pixels; ++i) {
          sum_g += static_cast<double>(g[base + i]);
          sum_gh += static_cast<double>(g[base + i]) * static_cast<double>(xhat[base + i]);
        }
      }
      if (gg) (*gg)[c] += static_cast<Scalar>(sum_gh);
      if (gb) (*gb)[c] += static_cast<Scalar>(sum_g);
      if (!gx) continue;
      const Scalar gm = gamma.value()[c];
      const Scalar is = inv_std[ci];
      const Scalar mean_g = static_cast<Scalar>(sum_g / static_cast<double>(count));
      const Scalar mean_gh = static_cast<Scalar>(sum_gh / static_cast<double>(count));
      for (Index b = 0; b < batch; ++b) {
        const Index base = (b * channels + c) * pixels;
        for (Index i = 0; i < pixels; ++i) {
          if (train) {
            (*gx)[base + i] += gm * is * (g[base + i] - mean_g - xhat[base + i] * mean_gh);
          } else {
            (*gx)[base + i] += gm * is * g[base + i];
          }
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  require_rank(x, 4, "global_avg_pool");
  const Index batch = x.value().dim(0);
  const Index channels = x.value().dim(1);
  const Index pixels = x.value().dim(2) * x.value().dim(3);
  Tensor<Scalar> out(Shape{batch, channels});
  out.matrix(batch * channels, 1) = x.value().matrix(batch * channels, pixels).rowwise().mean();
  return tape_of(x).record(std::move(out), {x}, [x, batch, channels, pixels](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (auto* gx = t.grad_sink(x)) {
      gx->matrix(batch * channels, pixels).colwise() +=
          g.matrix(batch * channels, 1).col(0) / static_cast<Scalar>(pixels);
    }
  });
}

template <typename Scalar>
Var<Scalar> split_heads(const Var<Scalar>& x, Index heads) {
  require_rank(x, 3, "split_heads");
  const Index batch = x.value().dim(0);
  const Index tokens = x.value().dim(1);
  const Index width = x.value().dim(2);
  if (heads < 1 || width % heads != 0) {
    throw DimensionError("split_heads: width " + std::to_string(width) + " not divisible by " + std::to_string(heads));
  }
  const Index d = width / heads;
  Tensor<Scalar> out(Shape{batch * heads, tokens, d});
  for (Index b = 0; b < batch; ++b)
    for (Index tk = 0; tk < tokens; ++tk)
      for (Index h = 0; h < heads; ++h)
        for (Index i = 0; i < d; ++i)
          out[((b * heads + h) * tokens + tk) * d + i] = x.value()[(b * tokens + tk) * width + h * d + i];
  return tape_of(x).record(std::move(out), {x}, [x, batch, tokens, heads, d, width](Tape<Scalar>& t,
                                                                                   const Tensor<Scalar>& g) {
    auto* gx = t.grad_sink(x);
    if (!gx) return;
    for (Index b = 0; b < batch; ++b)
      for (Index tk = 0; tk < tokens; ++tk)
        for (Index h = 0; h < heads; ++h)
          for (Index i = 0; i < d; ++i)
            (*gx)[(b * tokens + tk) * width + h * d + i] += g[((b * heads + h) * tokens + tk) * d + i];
  });
}

template <typename Scalar>
Var<Scalar> merge_heads(const Var<Scalar>& x, Index heads) {
  require_rank(x, 3, "merge_heads");
  const Index groups = x.value().dim(0);
  if (heads < 1 || groups % heads != 0) {
    throw DimensionError("merge_heads: " + std::to_string(groups) + " groups not divisible by " + std::to_string(heads));
  }
  const Index batch = groups / heads;
  const Index tokens = x.value().dim(1);
  const Index d = x.value().dim(2);
  const Index width = heads * d;
  Tensor<Scalar> out(Shape{batch, tokens, width});
  for (Index b = 0; b < batch; ++b)
    for (Index tk = 0; tk < tokens; ++tk)
      for (Index h = 0; h < heads; ++h)
        for (Index i = 0; i < d; ++i)
          out[(b * tokens + tk) * width + h * d + i] = x.value()[((b * heads + h) * tokens + tk) * d + i];
  return tape_of(x).record(std::move(out), {x}, [x, batch, tokens, heads, d, width](Tape<Scalar>& t,
                                                                                   const Tensor<Scalar>& g) {
    auto* gx = t.grad_sink(x);
    if (!gx) return;
    for (Index b = 0; b < batch; ++b)
      for (Index tk = 0; tk < tokens; ++tk)
        for (Index h = 0; h < heads; ++h)
          for (Index i = 0; i < d; ++i)
            (*gx)[((b * heads + h) * tokens + tk) * d + i] += g[(b * tokens + tk) * width + h * d + i];
  });
}

template <typename Scalar>
Var<Scalar> prepend_token(const Var<Scalar>& x, const Var<Scalar>& token) {
  require_rank(x, 3, "prepend_token");
  const Index batch = x.value().dim(0);
  const Index tokens = x.value().dim(1);
  const Index width = x.value().dim(2);
  if (token.value().size() != width) {
    throw DimensionError("prepend_token: token " + to_string(token.shape()) + " vs input " + to_string(x.shape()));
  }
  Tensor<Scalar> out(Shape{batch, tokens + 1, width});
  for (Index b = 0; b < batch; ++b) {
    std::copy_n(token.value().data().data(), width, out.data().data() + b * (tokens + 1) * width);
    std::copy_n(x.value().data().data() + b * tokens * width, tokens * width,
                out.data().data() + (b * (tokens + 1) + 1) * width);
  }
  return tape_of(x).record(std::move(out), {x, token}, [x, token, batch, tokens, width](Tape<Scalar>& t,
                                                                                       const Tensor<Scalar>& g) {
    auto* gx = t.grad_sink(x);
    auto* gt = t.grad_sink(token);
    for (Index b = 0; b < batch; ++b) {
      const Scalar* gb = g.data().data() + b * (tokens + 1) * width;
      if (gt) gt->vector() += ConstVectorMap<Scalar>(gb, width);
      if (gx) {
        VectorMap<Scalar>(gx->data().data() + b * tokens * width, tokens * width) +=
            ConstVectorMap<Scalar>(gb + width, tokens * width);
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> take_token(const Var<Scalar>& x, Index index) {
  require_rank(x, 3, "take_token");
  const Index batch = x.value().dim(0);
  const Index tokens = x.value().dim(1);
  const Index width = x.value().dim(2);
  if (index < 0 || index >= tokens) {
    throw DimensionError("take_token: index out of range for " + to_string(x.shape()));
  }
  Tensor<Scalar> out(Shape{batch, width});
  for (Index b = 0; b < batch; ++b) {
    std::copy_n(x.value().data().data() + (b * tokens + index) * width, width, out.data().data() + b * width);
  }
  return tape_of(x).record(std::move(out), {x}, [x, index, batch, tokens, width](Tape<Scalar>& t,
                                                                                const Tensor<Scalar>& g) {
    if (auto* gx = t.grad_sink(x)) {
      for (Index b = 0; b < batch; ++b) {
        VectorMap<Scalar>(gx->data().data() + (b * tokens + index) * width, width) +=
            ConstVectorMap<Scalar>(g.data().data() + b * width, width);
      }
    }
  });
}

#define GENQ_INSTANTIATE_OPS(S)                                                                              \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                         \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                         \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                         \
  template Var<S> scale(const Var<S>&, S);                                                                   \
  template Var<S> add_broadcast(const Var<S>&, const Var<S>&);                                               \
  template Var<S> reshape(const Var<S>&, Shape);                                                             \
  template Var<S> sum(const Var<S>&);                                                                        \
  template Var<S> mean(const Var<S>&);                                                                       \
  template Var<S> mse(const Var<S>&, const Var<S>&);                                                         \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                                      \
  template Var<S> bmm(const Var<S>&, const Var<S>&, bool);                                                   \
  template Var<S> linear(const Var<S>&, const Var<S>&, const std::optional<Var<S>>&);                        \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const std::optional<Var<S>>&, Conv2dOptions);         \
  template Var<S> relu(const Var<S>&);                                                                       \
  template Var<S> gelu(const Var<S>&);                                                                       \
  template Var<S> softmax(const Var<S>&);                                                                    \
  template Var<S> cross_entropy(const Var<S>&, std::span<const int>);                                        \
  template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                                \
  template BatchStats channel_stats(const Tensor<S>&);                                                       \
  template Var<S> batch_norm(const Var<S>&, const Var<S>&, const Var<S>&, BatchNormState<S>&, BatchNormMode, \
                             bool, BatchStats*);                                                             \
  template Var<S> global_avg_pool(const Var<S>&);                                                            \
  template Var<S> split_heads(const Var<S>&, Index);                                                         \
  template Var<S> merge_heads(const Var<S>&, Index);                                                         \
  template Var<S> prepend_token(const Var<S>&, const Var<S>&);                                               \
  template Var<S> take_token(const Var<S>&, Index);

GENQ_INSTANTIATE_OPS(float)
GENQ_INSTANTIATE_OPS(double)

#undef GENQ_INSTANTIATE_OPS

}  // namespace genq::nn
