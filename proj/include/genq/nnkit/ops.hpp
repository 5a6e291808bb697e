// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "genq/nnkit/tape.hpp"

namespace genq::nn {

// Differentiable free functions over tape variables. Every function is
// instantiated for float (models) and double (gradient checking).

template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> scale(const Var<Scalar>& a, Scalar factor);

/// x + y where y's shape equals the trailing dimensions of x.
template <typename Scalar> Var<Scalar> add_broadcast(const Var<Scalar>& x, const Var<Scalar>& y);

template <typename Scalar> Var<Scalar> reshape(const Var<Scalar>& x, Shape shape);

template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> mean(const Var<Scalar>& x);

/// Mean of squared differences over all elements.
template <typename Scalar> Var<Scalar> mse(const Var<Scalar>& a, const Var<Scalar>& b);

/// [M x K] . [K x N] -> [M x N].
template <typename Scalar> Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);

/// Batched product over the leading axis: [G x M x K] . [G x K x N], or
/// [G x M x K] . [G x N x K]^T when `transpose_b` is set.
template <typename Scalar>
Var<Scalar> bmm(const Var<Scalar>& a, const Var<Scalar>& b, bool transpose_b = false);

/// x . W^T + b over the last axis of x. W is [out x in], b is [out].
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const std::optional<Var<Scalar>>& bias);

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
};

/// x [B x C x H x W], weight [O x C x k x k], bias [O].
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const std::optional<Var<Scalar>>& bias,
                   Conv2dOptions options);

template <typename Scalar> Var<Scalar> relu(const Var<Scalar>& x);

/// Exact (erf) GELU.
template <typename Scalar> Var<Scalar> gelu(const Var<Scalar>& x);

/// Softmax over the last axis.
template <typename Scalar> Var<Scalar> softmax(const Var<Scalar>& x);

/// Mean cross-entropy of logits [B x C] against integer labels.
template <typename Scalar> Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const int> labels);

/// Normalization over the last axis with affine gamma/beta.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Scalar eps = Scalar(1e-5));

enum class BatchNormMode { train, eval };

/// Running statistics of one BatchNorm layer. Variance is stored unbiased.
template <typename Scalar>
struct BatchNormState {
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);

  explicit BatchNormState(Index channels = 0)
      : running_mean(Shape{channels}, Scalar{0}), running_var(Shape{channels}, Scalar{1}) {}
};

/// Per-channel statistics of a batch over (B, H, W); `stddev` is biased.
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// BatchNorm over x [B x C x H x W]. Train mode normalizes with batch
/// statistics, eval mode with the running ones. Running statistics change only
/// when `update_running` is set (train mode). The batch statistics of the input
/// are written to `observed` in either mode when it is non-null.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       BatchNormState<Scalar>& state, BatchNormMode mode, bool update_running,
                       BatchStats* observed = nullptr);

/// Per-channel biased batch statistics of x [B x C x H x W], accumulated in double.
template <typename Scalar>
BatchStats channel_stats(const Tensor<Scalar>& x);

/// [B x C x H x W] -> [B x C].
template <typename Scalar> Var<Scalar> global_avg_pool(const Var<Scalar>& x);

/// [B x T x (H*d)] -> [(B*H) x T x d].
template <typename Scalar> Var<Scalar> split_heads(const Var<Scalar>& x, Index heads);

/// [(B*H) x T x d] -> [B x T x (H*d)].
template <typename Scalar> Var<Scalar> merge_heads(const Var<Scalar>& x, Index heads);

/// [B x T x D] with token [D] -> [B x (T+1) x D], token first.
template <typename Scalar> Var<Scalar> prepend_token(const Var<Scalar>& x, const Var<Scalar>& token);

/// [B x T x D] -> [B x D] picking token `index`.
template <typename Scalar> Var<Scalar> take_token(const Var<Scalar>& x, Index index);

}  // namespace genq::nn
