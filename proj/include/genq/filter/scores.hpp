// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "genq/nnkit/model.hpp"

namespace genq::filter {

using nn::Index;
using nn::TensorD;
using nn::TensorF;

/// `sum_exp` is -a * sum exp(-f/a); `logsumexp` is -a * log sum exp(f/a).
enum class EnergyForm { sum_exp, logsumexp };

std::string_view to_string(EnergyForm form);
EnergyForm parse_energy_form(std::string_view name);

/// Energy of one logit vector. Lower means more in-distribution.
double energy_score(std::span<const float> logits, double alpha = 1.0, EnergyForm form = EnergyForm::sum_exp);

/// Energies of every image under the float model (eval mode).
/// `ids` only labels error messages; defaults to row positions.
std::vector<double> energy_scores(const nn::Model& model, const TensorF& images, double alpha = 1.0,
                                  EnergyForm form = EnergyForm::sum_exp, std::span<const std::uint64_t> ids = {});

/// Sum over layers of ||mu_obs - mu_ref|| + ||sigma_obs - sigma_ref||.
double bn_distance(std::span<const nn::BatchStats> observed, std::span<const nn::BatchStats> reference);

/// Running statistics of every BN layer, with sigma = sqrt(running variance).
std::vector<nn::BatchStats> running_stats(const nn::Model& model);

/// Statistics of every BN input for `batch`, observed in eval mode.
std::vector<nn::BatchStats> observed_stats(const nn::Model& model, const TensorF& batch);

/// D_BN(batch) - D_BN(batch without image i), each from its own forward pass.
double bn_sensitivity(const TensorF& batch, const nn::Model& model, Index i);

/// Sensitivities of every image of one batch from a single forward pass.
/// In eval mode each image's BN inputs are independent of the others, so
/// the leave-one-out statistics follow exactly from per-image moments.
std::vector<double> bn_sensitivities(const TensorF& batch, const nn::Model& model);

/// Pairwise cosine similarity of the rows of o [N x D].
TensorD patch_similarity(const TensorF& o);

struct PatchEntropy {
  double value = 0.0;
  double bandwidth = 0.0;
};

inline constexpr double kMinBandwidth = 1e-3;
inline constexpr Index kEntropyGrid = 512;

/// Scott's rule over the entries of gamma, floored at kMinBandwidth.
double scott_bandwidth(std::span<const double> values);

/// Differential entropy of a Gaussian KDE over all N*N entries of gamma.
/// A positive `bandwidth` replaces Scott's rule.
PatchEntropy patch_entropy(const TensorD& gamma, double bandwidth = 0.0);

/// Final-block patch features [B x P x D] of a ViT (class token excluded).
TensorF patch_features(const nn::Model& vit, const TensorF& images);

/// Patch entropy of every image. Runs on up to `threads` workers.
std::vector<PatchEntropy> patch_entropies(const nn::Model& vit, const TensorF& images, int threads = 1);

}  // namespace genq::filter
