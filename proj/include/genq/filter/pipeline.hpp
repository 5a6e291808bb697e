// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "genq/datasrc/dataset.hpp"
#include "genq/filter/scores.hpp"

namespace genq::filter {

enum class SecondStage { none, bn_sensitivity, patch_entropy };

std::string_view to_string(SecondStage stage);

struct ScoredSample {
  std::uint64_t id = 0;
  int label = 0;
  double energy = std::numeric_limits<double>::quiet_NaN();
  double stage2_score = std::numeric_limits<double>::quiet_NaN();
  bool kept = true;
};

struct FilterReport {
  std::vector<ScoredSample> samples;  // pool order
  double r1 = 0.0;
  double r2 = 0.0;
  double alpha = 1.0;
  EnergyForm form = EnergyForm::sum_exp;
  SecondStage stage2 = SecondStage::none;
  Index bn_batch = 0;
  double mean_bandwidth = 0.0;
  std::uint64_t model_hash = 0;

  [[nodiscard]] std::vector<std::uint64_t> kept_ids() const;
  [[nodiscard]] std::vector<Index> kept_rows() const;
};

/// Number kept from `n` candidates at ratio r: ceil(n * (1 - r)).
Index keep_count(Index n, double r);

// Selection rules over a score vector. Each returns a kept flag per entry;
// ties are broken by ascending id.

/// Per class, keep the ceil(n_c (1 - r)) lowest scores.
std::vector<bool> keep_lowest_per_class(std::span<const double> scores, std::span<const int> labels,
                                        std::span<const std::uint64_t> ids, double r);
/// Per class, keep the ceil(n_c (1 - r)) highest scores.
std::vector<bool> keep_highest_per_class(std::span<const double> scores, std::span<const int> labels,
                                         std::span<const std::uint64_t> ids, double r);
/// Within consecutive batches of `batch`, drop the ceil(b r) highest scores.
std::vector<bool> drop_highest_per_batch(std::span<const double> scores, std::span<const std::uint64_t> ids,
                                         double r, Index batch);

/// Energy stage over already scored samples.
FilterReport energy_filter(std::vector<ScoredSample> pool, double r);

/// BN-sensitivity stage. Batches are formed in pool order.
FilterReport bn_filter(const data::Dataset& pool, std::span<const std::uint64_t> ids, const nn::Model& model,
                       double r, Index batch = 64);

/// Patch-entropy stage; keeps the most diverse samples per class.
FilterReport patch_filter(const data::Dataset& pool, std::span<const std::uint64_t> ids, const nn::Model& vit,
                          double r, int threads = 1);

struct PipelineOptions {
  double r1 = 0.5;
  double r2 = 0.5;
  double alpha = 1.0;
  EnergyForm form = EnergyForm::sum_exp;
  Index bn_batch = 64;
  int threads = 1;
};

/// Energy filtering, then BN sensitivity for BN models or patch entropy
/// otherwise. `ids` defaults to row positions.
FilterReport run_pipeline(const data::Dataset& pool, const nn::Model& model, const PipelineOptions& options = {},
                          std::span<const std::uint64_t> ids = {});

/// Rows of `pool` that were kept, in pool order.
data::Dataset kept_subset(const data::Dataset& pool, const FilterReport& report);

void write_report_csv(const FilterReport& report, const std::string& path);
void write_report_json(const FilterReport& report, const std::string& path);
void write_manifest(const FilterReport& report, const std::string& path);
std::vector<std::uint64_t> read_manifest(const std::string& path);

}  // namespace genq::filter
