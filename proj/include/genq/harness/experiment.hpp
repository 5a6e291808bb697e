// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "genq/datasrc/dataset.hpp"
#include "genq/filter/pipeline.hpp"
#include "genq/harness/config.hpp"
#include "genq/quant/quantized_model.hpp"

namespace genq::harness {

/// Independent seed for a named sub-stream of an experiment seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

data::Dataset train_set(const ExperimentConfig& config, std::uint64_t seed);
data::Dataset eval_set(const ExperimentConfig& config, std::uint64_t seed);

struct Baseline {
  nn::Model model;
  std::vector<double> epoch_loss;  // empty when loaded from the cache
  std::string path;
};

/// Float model for (arch, seed). Reuses <cache>/<arch>_seed<k>_<hash>.gqm when
/// present, where the hash covers the training settings; `retrain` forces a
/// fresh run (and refreshes the cache).
Baseline baseline(const ExperimentConfig& config, nn::Architecture arch, std::uint64_t seed, bool retrain = false);

/// Candidate pool: clean procedural (or externally generated) images mixed
/// with corrupted ones, shuffled so that batches see both.
struct Pool {
  data::Dataset data;
  std::vector<bool> clean;
  std::vector<std::string> warnings;
  bool external = false;
};

Pool make_pool(const ExperimentConfig& config, Index n_gen, std::uint64_t seed);

/// Fraction of the kept samples that are clean.
double kept_clean_fraction(const Pool& pool, const filter::FilterReport& report);

/// The first `n_keep` kept samples in pool order (all of them if fewer).
data::Dataset calibration_set(const Pool& pool, const filter::FilterReport& report, Index n_keep);

filter::PipelineOptions pipeline_options(const ExperimentConfig& config, int threads = 1);

struct PtqOutcome {
  quant::QuantizedModel model;
  double calibrated_accuracy = 0.0;  // nearest rounding
  double accuracy = 0.0;             // after rounding reconstruction
};

PtqOutcome run_ptq(const nn::Model& model, const data::Dataset& calib, const QuantSpec& spec,
                   const data::Dataset& eval, std::uint64_t seed);

/// Pool size that leaves about `n_keep` samples after both stages.
Index pool_size_for(Index n_keep, double r1, double r2);

/// GENQ_THREADS, defaulting to 1.
int threads_from_env();

}  // namespace genq::harness
