// SPDX-License-Identifier: Apache-2.0
#include "genq/filter/scores.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "genq/common/error.hpp"
#include "genq/common/parallel.hpp"

namespace genq::filter {
namespace {

constexpr Index kChunk = 64;
// Gaussian kernel terms beyond this many bandwidths are below 1e-31 of the peak.
constexpr double kKernelReach = 12.0;

nn::Model& mutable_model(const nn::Model& model) {
  // Eval-mode forward passes without running-stat updates leave the model untouched.
  return const_cast<nn::Model&>(model);
}

void require_images(const TensorF& images, const char* what) {
  if (images.rank() != 4 || images.dim(0) == 0) {
    throw ContractError(std::string(what) + ": expected a non-empty [B x 3 x 32 x 32] batch, got " +
                        nn::to_string(images.shape()));
  }
}

std::vector<nn::TensorF> bn_inputs(const nn::Model& model, const TensorF& batch) {
  std::vector<TensorF> inputs;
  nn::Tape<float> tape;
  tape.set_grad_enabled(false);
  nn::ForwardContext ctx;
  ctx.bn_inputs = &inputs;
  (void)mutable_model(model).forward(tape, batch, ctx);
  return inputs;
}

double norm_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw ContractError("bn_distance: channel count " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

std::string_view to_string(EnergyForm form) { return form == EnergyForm::sum_exp ? "sum_exp" : "logsumexp"; }

EnergyForm parse_energy_form(std::string_view name) {
  if (name == "sum_exp") return EnergyForm::sum_exp;
  if (name == "logsumexp") return EnergyForm::logsumexp;
  throw ContractError("unknown energy form '" + std::string(name) + "' (expected sum_exp or logsumexp)");
}

double energy_score(std::span<const float> logits, double alpha, EnergyForm form) {
  if (!(alpha > 0.0)) {
    throw ContractError("energy_score: temperature must be positive");
  }
  if (logits.size() < 2) {
    throw ContractError("energy_score: need at least two classes");
  }
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) {
      throw ScoringError("energy_score: logit " + std::to_string(i) + " is not finite");
    }
  }
  // Exponents are -f/a for the sum-exp form and f/a for log-sum-exp.
  const double sign = form == EnergyForm::sum_exp ? -1.0 : 1.0;
  double top = -std::numeric_limits<double>::infinity();
  for (const float f : logits) top = std::max(top, sign * f / alpha);
  double acc = 0.0;
  for (const float f : logits) acc += std::exp(sign * f / alpha - top);
  const double log_sum = top + std::log(acc);
  if (form == EnergyForm::logsumexp) return -alpha * log_sum;
  const double e = -std::exp(std::log(alpha) + log_sum);
  return std::isfinite(e) ? e : std::numeric_limits<double>::lowest();
}

std::vector<double> energy_scores(const nn::Model& model, const TensorF& images, double alpha, EnergyForm form,
                                  std::span<const std::uint64_t> ids) {
  require_images(images, "energy_scores");
  if (!ids.empty() && static_cast<Index>(ids.size()) != images.dim(0)) {
    throw ContractError("energy_scores: one id per image required");
  }
  const TensorF logits = model.logits(images);
  const Index classes = logits.dim(1);
  std::vector<double> out(static_cast<std::size_t>(logits.dim(0)));
  for (Index i = 0; i < logits.dim(0); ++i) {
    try {
      out[static_cast<std::size_t>(i)] =
          energy_score(std::span<const float>(logits.data().data() + i * classes, static_cast<std::size_t>(classes)),
                       alpha, form);
    } catch (const ScoringError& e) {
      const std::uint64_t id = ids.empty() ? static_cast<std::uint64_t>(i) : ids[static_cast<std::size_t>(i)];
      throw ScoringError("sample " + std::to_string(id) + ": " + e.what());
    }
  }
  return out;
}

double bn_distance(std::span<const nn::BatchStats> observed, std::span<const nn::BatchStats> reference) {
  if (observed.size() != reference.size()) {
    throw ContractError("bn_distance: " + std::to_string(observed.size()) + " observed layers vs " +
                        std::to_string(reference.size()) + " reference layers");
  }
  double d = 0.0;
  for (std::size_t l = 0; l < observed.size(); ++l) {
    d += norm_diff(observed[l].mean, reference[l].mean) + norm_diff(observed[l].stddev, reference[l].stddev);
  }
  return d;
}

std::vector<nn::BatchStats> running_stats(const nn::Model& model) {
  std::vector<nn::BatchStats> out;
  for (const auto& bn : model.bn_layers()) {
    nn::BatchStats s;
    for (const float m : bn.running_mean.data()) s.mean.push_back(m);
    for (const float v : bn.running_var.data()) s.stddev.push_back(std::sqrt(static_cast<double>(v)));
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<nn::BatchStats> observed_stats(const nn::Model& model, const TensorF& batch) {
  require_images(batch, "observed_stats");
  std::vector<nn::BatchStats> stats;
  nn::Tape<float> tape;
  tape.set_grad_enabled(false);
  nn::ForwardContext ctx;
  ctx.bn_observed = &stats;
  (void)mutable_model(model).forward(tape, batch, ctx);
  return stats;
}

double bn_sensitivity(const TensorF& batch, const nn::Model& model, Index i) {
  require_images(batch, "bn_sensitivity");
  const Index b = batch.dim(0);
  if (b < 2) throw ContractError("bn_sensitivity: leave-one-out needs a batch of at least 2");
  if (!model.has_batch_norm()) throw ContractError("bn_sensitivity: model has no BatchNorm layers");
  if (i < 0 || i >= b) throw ContractError("bn_sensitivity: image index out of range");
  std::vector<Index> rest;
  for (Index j = 0; j < b; ++j) {
    if (j != i) rest.push_back(j);
  }
  const auto ref = running_stats(model);
  return bn_distance(observed_stats(model, batch), ref) - bn_distance(observed_stats(model, batch.gather(rest)), ref);
}

std::vector<double> bn_sensitivities(const TensorF& batch, const nn::Model& model) {
  require_images(batch, "bn_sensitivities");
  const Index b = batch.dim(0);
  if (b < 2) throw ContractError("bn_sensitivities: leave-one-out needs a batch of at least 2");
  if (!model.has_batch_norm()) throw ContractError("bn_sensitivities: model has no BatchNorm layers");
  const auto ref = running_stats(model);
  const auto inputs = bn_inputs(model, batch);
  const auto nb = static_cast<std::size_t>(b);

  std::vector<double> full(1, 0.0);
  std::vector<double> without(nb, 0.0);
  for (std::size_t l = 0; l < inputs.size(); ++l) {
    const TensorF& x = inputs[l];
    const Index channels = x.dim(1);
    const Index pixels = x.dim(2) * x.dim(3);
    const auto n = static_cast<double>(pixels);
    // Per-image channel means and centred second moments.
    std::vector<double> mean(nb * static_cast<std::size_t>(channels));
    std::vector<double> m2(mean.size());
    for (Index j = 0; j < b; ++j) {
      for (Index c = 0; c < channels; ++c) {
        const float* p = x.data().data() + (j * channels + c) * pixels;
        double s = 0.0;
        for (Index k = 0; k < pixels; ++k) s += p[k];
        const double mu = s / n;
        double ss = 0.0;
        for (Index k = 0; k < pixels; ++k) ss += (p[k] - mu) * (p[k] - mu);
        const auto at = static_cast<std::size_t>(j * channels + c);
        mean[at] = mu;
        m2[at] = ss;
      }
    }
    // Pooled statistics over every image except `skip` (or none when skip == b).
    auto pooled = [&](std::size_t skip) {
      nn::BatchStats s;
      const double count = static_cast<double>(skip < nb ? nb - 1 : nb);
      for (Index c = 0; c < channels; ++c) {
        double sum = 0.0;
        for (std::size_t j = 0; j < nb; ++j) {
          if (j != skip) sum += mean[j * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)];
        }
        const double mu = sum / count;
        double total = 0.0;
        for (std::size_t j = 0; j < nb; ++j) {
          if (j == skip) continue;
          const auto at = j * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c);
          total += m2[at] + n * (mean[at] - mu) * (mean[at] - mu);
        }
        s.mean.push_back(mu);
        s.stddev.push_back(std::sqrt(total / (count * n)));
      }
      return s;
    };
    const nn::BatchStats all = pooled(nb);
    full[0] += norm_diff(all.mean, ref[l].mean) + norm_diff(all.stddev, ref[l].stddev);
    for (std::size_t i = 0; i < nb; ++i) {
      const nn::BatchStats s = pooled(i);
      without[i] += norm_diff(s.mean, ref[l].mean) + norm_diff(s.stddev, ref[l].stddev);
    }
  }
  std::vector<double> out(nb);
  for (std::size_t i = 0; i < nb; ++i) out[i] = full[0] - without[i];
  return out;
}

TensorD patch_similarity(const TensorF& o) {
  if (o.rank() != 2 || o.dim(0) == 0) {
    throw DimensionError("patch_similarity: expected [N x D], got " + nn::to_string(o.shape()));
  }
  const Index n = o.dim(0);
  const Eigen::MatrixXd m = o.matrix(n, o.dim(1)).cast<double>();
  const Eigen::VectorXd norms = m.rowwise().norm();
  for (Index i = 0; i < n; ++i) {
    if (!(norms(i) > 0.0)) throw ScoringError("patch_similarity: patch " + std::to_string(i) + " has zero norm");
  }
  const Eigen::MatrixXd unit = norms.cwiseInverse().asDiagonal() * m;
  TensorD gamma({n, n});
  gamma.matrix(n, n) = unit * unit.transpose();
  for (Index i = 0; i < n; ++i) {
    gamma.at(i, i) = 1.0;
    for (Index j = i + 1; j < n; ++j) {
      const double v = std::clamp(gamma.at(i, j), -1.0, 1.0);
      gamma.at(i, j) = v;
      gamma.at(j, i) = v;
    }
  }
  return gamma;
}

double scott_bandwidth(std::span<const double> values) {
  const auto m = static_cast<double>(values.size());
  if (values.size() < 2) return kMinBandwidth;
  double mean = 0.0;
  for (const double v : values) mean += v;
  mean /= m;
  double ss = 0.0;
  for (const double v : values) ss += (v - mean) * (v - mean);
  const double sigma = std::sqrt(ss / (m - 1.0));
  return std::max(kMinBandwidth, sigma * std::pow(m, -0.2));
}

PatchEntropy patch_entropy(const TensorD& gamma, double bandwidth) {
  if (gamma.rank() != 2 || gamma.dim(0) != gamma.dim(1)) {
    throw DimensionError("patch_entropy: expected a square matrix, got " + nn::to_string(gamma.shape()));
  }
  if (gamma.dim(0) < 2) throw ContractError("patch_entropy: need at least two patches");
  std::vector<double> values(gamma.data().begin(), gamma.data().end());
  const double h = bandwidth > 0.0 ? bandwidth : scott_bandwidth(values);
  std::sort(values.begin(), values.end());
  const double lo = values.front() - 3.0 * h;
  const double hi = values.back() + 3.0 * h;
  const double dx = (hi - lo) / static_cast<double>(kEntropyGrid - 1);
  const double norm = 1.0 / (static_cast<double>(values.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  double integral = 0.0;
  for (Index g = 0; g < kEntropyGrid; ++g) {
    const double x = lo + dx * static_cast<double>(g);
    const auto first = std::lower_bound(values.begin(), values.end(), x - kKernelReach * h);
    const auto last = std::upper_bound(first, values.end(), x + kKernelReach * h);
    double f = 0.0;
    for (auto it = first; it != last; ++it) {
      const double z = (x - *it) / h;
      f += std::exp(-0.5 * z * z);
    }
    f *= norm;
    const double term = f > 0.0 ? f * std::log(f) : 0.0;
    integral += (g == 0 || g == kEntropyGrid - 1) ? 0.5 * term : term;
  }
  return PatchEntropy{-integral * dx, h};
}

TensorF patch_features(const nn::Model& vit, const TensorF& images) {
  require_images(images, "patch_features");
  if (vit.has_batch_norm()) {
    throw RoutingError("patch features are defined for the transformer model only");
  }
  std::vector<TensorF> parts;
  for (Index first = 0; first < images.dim(0); first += kChunk) {
    nn::Tape<float> tape;
    tape.set_grad_enabled(false);
    TensorF features;
    nn::ForwardContext ctx;
    ctx.patch_features = &features;
    (void)mutable_model(vit).forward(tape, images.slice(first, std::min(kChunk, images.dim(0) - first)), ctx);
    parts.push_back(std::move(features));
  }
  return nn::concat_rows<float>(parts);
}

std::vector<PatchEntropy> patch_entropies(const nn::Model& vit, const TensorF& images, int threads) {
  const TensorF features = patch_features(vit, images);
  const Index patches = features.dim(1);
  const Index dim = features.dim(2);
  std::vector<PatchEntropy> out(static_cast<std::size_t>(features.dim(0)));
  parallel_for(out.size(), threads, [&](std::size_t i) {
    const TensorF o({patches, dim}, std::vector<float>(features.data().begin() + static_cast<std::ptrdiff_t>(i) * patches * dim,
                                                       features.data().begin() + static_cast<std::ptrdiff_t>(i + 1) * patches * dim));
    try {
      out[i] = patch_entropy(patch_similarity(o));
    } catch (const ScoringError& e) {
      throw ScoringError("sample " + std::to_string(i) + ": " + e.what());
    }
  });
  return out;
}

}  // namespace genq::filter
