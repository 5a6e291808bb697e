// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "genq/quant/quantized_model.hpp"

namespace genq::quant {

struct ReconstructOptions {
  int iters = 500;
  int batch_size = 32;
  double lr = 1e-2;
  /// Weight of the rounding regularizer once warm-up ends.
  double lambda = 0.01;
  /// Fraction of iterations without the regularizer.
  double warmup = 0.2;
  double beta_start = 20.0;
  double beta_end = 2.0;
  std::uint64_t seed = 0;
};

/// One reconstruction target: a differentiable block whose weights are
/// quantized, the inputs it sees and the outputs it should reproduce.
struct BlockProblem {
  using Forward = std::function<Var<float>(nn::Tape<float>&, std::span<const Var<float>> weights, const Var<float>& input)>;

  std::vector<TensorF> weights;
  std::vector<QuantParam> params;
  Forward forward;
  TensorF inputs;
  TensorF targets;
};

struct BlockResult {
  /// Final rounding logits, one per weight.
  std::vector<TensorF> v;
  double nearest_error = 0.0;
  double learned_error = 0.0;
  /// Set when learned rounding did worse than nearest rounding and was discarded.
  bool reverted = false;
};

/// Mean over samples of the per-sample squared error between the block's
/// output (weights rounded by `v`) and the targets.
double block_error(const BlockProblem& problem, std::span<const TensorF> v);

/// Optimizes relaxed rounding decisions; with `iters == 0` returns the
/// nearest-rounding logits unchanged.
BlockResult reconstruct_block(const BlockProblem& problem, const ReconstructOptions& options);

/// Learned rounding for the weights of one model block. The block's inputs
/// come from the quantized prefix of the model, its targets from the float
/// model.
QuantizedModel reconstruct_rounding(QuantizedModel qm, const TensorF& calib_images, std::size_t block,
                                    const ReconstructOptions& options, BlockResult* result = nullptr);

/// Reconstructs every block in order, feeding each block the output of the
/// already-reconstructed prefix.
QuantizedModel reconstruct_model(QuantizedModel qm, const TensorF& calib_images, const ReconstructOptions& options,
                                 std::vector<BlockResult>* results = nullptr);

}  // namespace genq::quant
