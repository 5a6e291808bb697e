// SPDX-License-Identifier: Apache-2.0
#include "genq/quant/reconstruct.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "genq/common/rng.hpp"
#include "genq/nnkit/ops.hpp"

namespace genq::quant {
namespace {

using nn::Index;
using nn::Tape;

constexpr Index kChunk = 128;

double squared_error(const TensorF& y, const TensorF& target) {
  if (y.shape() != target.shape()) {
    throw DimensionError("block output " + nn::to_string(y.shape()) + " vs target " + nn::to_string(target.shape()));
  }
  return (y.vector().cast<double>() - target.vector().cast<double>()).squaredNorm();
}

void check_problem(const BlockProblem& p) {
  if (p.weights.empty() || p.weights.size() != p.params.size()) {
    throw ContractError("block problem needs one quantizer per weight");
  }
  if (p.inputs.rank() == 0 || p.inputs.dim(0) == 0 || p.targets.rank() == 0 || p.inputs.dim(0) != p.targets.dim(0)) {
    throw ContractError("block problem needs matching, non-empty inputs and targets");
  }
  for (std::size_t j = 0; j < p.weights.size(); ++j) {
    p.params[j].validate();
  }
}

/// d/dv of 1 - |2h(v) - 1|^beta.
double regularizer_grad(double v, double beta) {
  const double sig = 1.0 / (1.0 + std::exp(-v));
  const double h = 1.2 * sig - 0.1;
  if (h <= 0.0 || h >= 1.0) return 0.0;
  const double d = 2.0 * h - 1.0;
  if (d == 0.0) return 0.0;
  const double dh = 1.2 * sig * (1.0 - sig);
  return -beta * std::pow(std::abs(d), beta - 1.0) * (d > 0 ? 1.0 : -1.0) * 2.0 * dh;
}

// Runs one model block over `input` in chunks, without gradients.
TensorF apply_block(nn::Model& model, nn::ForwardHooks* hooks, std::size_t block, const TensorF& input) {
  nn::ForwardContext ctx;
  ctx.hooks = hooks;
  std::vector<TensorF> parts;
  for (Index first = 0; first < input.dim(0); first += kChunk) {
    Tape<float> tape;
    tape.set_grad_enabled(false);
    const Var<float> x = tape.constant(input.slice(first, std::min(kChunk, input.dim(0) - first)));
    parts.push_back(model.forward_block(tape, block, x, ctx).value());
  }
  return nn::concat_rows<float>(parts);
}

std::vector<std::size_t> sites_of_block(const nn::Model& model, std::size_t block) {
  std::vector<std::size_t> sites;
  for (std::size_t s = 0; s < model.weight_sites().size(); ++s) {
    if (model.weight_sites()[s].block == block) sites.push_back(s);
  }
  return sites;
}

QuantParam relaxed(const QuantParam& q) {
  QuantParam out = q;
  out.stage = Stage::calibrated;
  out.v.reset();
  out.u.reset();
  return out;
}

// Reconstruction problem of one model block given its quantized and float inputs.
BlockProblem model_block_problem(const QuantizedModel& qm, std::size_t block, const TensorF& quant_input,
                                 TensorF float_target) {
  auto model = std::make_shared<nn::Model>(qm.base);
  model->set_trainable(false);
  const auto sites = sites_of_block(qm.base, block);
  if (sites.empty()) {
    throw ContractError("block " + std::to_string(block) + " has no quantized weights");
  }
  BlockProblem p;
  for (const std::size_t s : sites) {
    p.weights.push_back(qm.base.parameters()[qm.base.weight_sites()[s].parameter].value);
    p.params.push_back(relaxed(qm.weights[s]));
  }
  // The hooks keep a pointer to the quantizers, so they must outlive the call.
  auto owner = std::make_shared<QuantizedModel>(qm);
  auto hooks = std::make_shared<QuantHooks>(*owner, false, true);
  p.forward = [model, hooks, owner, sites, block](Tape<float>& tape, std::span<const Var<float>> weights,
                                                  const Var<float>& input) {
    hooks->weight_override.clear();
    for (std::size_t j = 0; j < sites.size(); ++j) hooks->weight_override.emplace(sites[j], weights[j]);
    nn::ForwardContext ctx;
    ctx.hooks = hooks.get();
    return model->forward_block(tape, block, input, ctx);
  };
  p.inputs = quant_input;
  p.targets = std::move(float_target);
  return p;
}

void install(QuantizedModel& qm, std::size_t block, const BlockResult& result) {
  const auto sites = sites_of_block(qm.base, block);
  for (std::size_t j = 0; j < sites.size(); ++j) {
    QuantParam& q = qm.weights[sites[j]];
    q.v = result.v[j];
    q.u.reset();
    q.stage = Stage::reconstructed;
  }
}

void require_not_finetuned(const QuantizedModel& qm) {
  for (const auto& q : qm.weights) {
    if (q.stage == Stage::qat_finetuned) {
      throw StageError("rounding reconstruction cannot run on a QAT-finetuned model");
    }
  }
}

}  // namespace

double block_error(const BlockProblem& problem, std::span<const TensorF> v) {
  check_problem(problem);
  if (v.size() != problem.weights.size()) {
    throw ContractError("block_error: need one rounding tensor per weight");
  }
  const Index n = problem.inputs.dim(0);
  double err = 0.0;
  for (Index first = 0; first < n; first += kChunk) {
    const Index count = std::min(kChunk, n - first);
    Tape<float> tape;
    tape.set_grad_enabled(false);
    std::vector<Var<float>> ws;
    for (std::size_t j = 0; j < v.size(); ++j) {
      ws.push_back(adaround_weight(tape.constant(problem.weights[j]), tape.constant(v[j]), problem.params[j], true));
    }
    const Var<float> y = problem.forward(tape, ws, tape.constant(problem.inputs.slice(first, count)));
    err += squared_error(y.value(), problem.targets.slice(first, count));
  }
  return err / static_cast<double>(n);
}

BlockResult reconstruct_block(const BlockProblem& problem, const ReconstructOptions& options) {
  check_problem(problem);
  const std::size_t k = problem.weights.size();
  std::vector<TensorF> nearest;
  for (std::size_t j = 0; j < k; ++j) nearest.push_back(nearest_rounding_logits(problem.weights[j], problem.params[j]));
  BlockResult result;
  result.nearest_error = block_error(problem, nearest);
  result.v = nearest;
  result.learned_error = result.nearest_error;
  if (options.iters <= 0) {
    return result;
  }

  std::vector<TensorF> v = nearest;
  std::vector<TensorF> m1;
  std::vector<TensorF> m2;
  for (const auto& t : v) {
    m1.push_back(TensorF::zeros(t.shape()));
    m2.push_back(TensorF::zeros(t.shape()));
  }
  Rng rng = Rng(options.seed).split("reconstruct");
  const Index n = problem.inputs.dim(0);
  const Index batch = std::min<Index>(std::max(1, options.batch_size), n);
  const int warm = static_cast<int>(std::floor(options.warmup * options.iters));
  constexpr double b1 = 0.9;
  constexpr double b2 = 0.999;
  for (int it = 0; it < options.iters; ++it) {
    std::vector<Index> rows(static_cast<std::size_t>(batch));
    for (auto& r : rows) r = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(n)));
    Tape<float> tape;
    std::vector<Var<float>> vars;
    std::vector<Var<float>> ws;
    for (std::size_t j = 0; j < k; ++j) {
      vars.push_back(tape.variable(v[j]));
      ws.push_back(adaround_weight(tape.constant(problem.weights[j]), vars.back(), problem.params[j], false));
    }
    const Var<float> y = problem.forward(tape, ws, tape.constant(problem.inputs.gather(rows)));
    const Var<float> d = nn::sub(y, tape.constant(problem.targets.gather(rows)));
    const Var<float> loss = nn::scale(nn::sum(nn::mul(d, d)), 1.0F / static_cast<float>(batch));
    tape.backward(loss);

    double lambda = 0.0;
    double beta = options.beta_start;
    if (it >= warm) {
      const double span = std::max(1, options.iters - warm);
      const double progress = static_cast<double>(it - warm) / span;
      beta = options.beta_end + (options.beta_start - options.beta_end) * std::max(0.0, 1.0 - progress);
      lambda = options.lambda;
    }
    const double c1 = 1.0 - std::pow(b1, it + 1);
    const double c2 = 1.0 - std::pow(b2, it + 1);
    for (std::size_t j = 0; j < k; ++j) {
      const TensorF g = tape.grad(vars[j]);
      for (Index i = 0; i < v[j].size(); ++i) {
        double gi = g[i];
        if (lambda > 0.0) gi += lambda * regularizer_grad(v[j][i], beta);
        m1[j][i] = static_cast<float>(b1 * m1[j][i] + (1 - b1) * gi);
        m2[j][i] = static_cast<float>(b2 * m2[j][i] + (1 - b2) * gi * gi);
        const double step = options.lr * (m1[j][i] / c1) / (std::sqrt(m2[j][i] / c2) + 1e-8);
        v[j][i] = static_cast<float>(v[j][i] - step);
      }
    }
  }
  result.learned_error = block_error(problem, v);
  if (result.learned_error <= result.nearest_error + 1e-9) {
    result.v = std::move(v);
  } else {
    result.reverted = true;
    result.learned_error = result.nearest_error;
  }
  return result;
}

QuantizedModel reconstruct_rounding(QuantizedModel qm, const TensorF& calib_images, std::size_t block,
                                    const ReconstructOptions& options, BlockResult* result) {
  require_not_finetuned(qm);
  if (block >= qm.base.num_blocks()) {
    throw ContractError("reconstruct_rounding: block " + std::to_string(block) + " out of range");
  }
  if (calib_images.rank() == 0 || calib_images.dim(0) == 0) {
    throw ContractError("reconstruct_rounding: empty calibration set");
  }
  nn::Model model = qm.base;
  model.set_trainable(false);
  TensorF quant_in = calib_images;
  TensorF float_in = calib_images;
  {
    QuantHooks hooks(qm);
    for (std::size_t b = 0; b < block; ++b) {
      quant_in = apply_block(model, &hooks, b, quant_in);
      float_in = apply_block(model, nullptr, b, float_in);
    }
  }
  TensorF target = apply_block(model, nullptr, block, float_in);
  const BlockProblem problem = model_block_problem(qm, block, quant_in, std::move(target));
  ReconstructOptions opts = options;
  opts.seed = Rng(options.seed).split(static_cast<std::uint64_t>(block)).next_u64();
  const BlockResult r = reconstruct_block(problem, opts);
  install(qm, block, r);
  if (result) *result = r;
  return qm;
}

QuantizedModel reconstruct_model(QuantizedModel qm, const TensorF& calib_images, const ReconstructOptions& options,
                                 std::vector<BlockResult>* results) {
  require_not_finetuned(qm);
  if (calib_images.rank() == 0 || calib_images.dim(0) == 0) {
    throw ContractError("reconstruct_model: empty calibration set");
  }
  nn::Model model = qm.base;
  model.set_trainable(false);
  TensorF quant_in = calib_images;
  TensorF float_in = calib_images;
  if (results) results->clear();
  for (std::size_t block = 0; block < model.num_blocks(); ++block) {
    TensorF target = apply_block(model, nullptr, block, float_in);
    const BlockProblem problem = model_block_problem(qm, block, quant_in, target);
    ReconstructOptions opts = options;
    opts.seed = Rng(options.seed).split(static_cast<std::uint64_t>(block)).next_u64();
    const BlockResult r = reconstruct_block(problem, opts);
    install(qm, block, r);
    if (results) results->push_back(r);
    if (block + 1 < model.num_blocks()) {
      QuantHooks hooks(qm);
      quant_in = apply_block(model, &hooks, block, quant_in);
      float_in = std::move(target);
    }
  }
  return qm;
}

}  // namespace genq::quant
