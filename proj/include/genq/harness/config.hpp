// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genq/filter/scores.hpp"
#include "genq/nnkit/model.hpp"

namespace genq::harness {

using nn::Index;

struct TrainSpec {
  Index samples = 5000;
  int epochs = 8;
  double lr = 0.05;
  int batch_size = 64;
  bool operator==(const TrainSpec&) const = default;
};

struct PoolSpec {
  Index n_gen = 1024;
  double corrupt_fraction = 0.5;
  int severity = 5;
  std::string source = "synthetic";  // synthetic | external
  bool operator==(const PoolSpec&) const = default;
};

struct FilterSpec {
  double r1 = 0.5;
  double r2 = 0.5;
  double alpha = 1.0;
  filter::EnergyForm energy_form = filter::EnergyForm::sum_exp;
  Index bn_batch = 64;
  bool operator==(const FilterSpec&) const = default;
};

struct QuantSpec {
  int w_bits = 4;
  int a_bits = 4;
  Index n_keep = 256;
  int iters = 500;
  double lr = 1e-2;
  double lambda = 0.01;
  int batch_size = 32;
  bool operator==(const QuantSpec&) const = default;
};

struct QatSpec {
  // QAT trains on its own filtered pool, much larger than the PTQ calibration set.
  Index n_train = 2048;
  int epochs = 20;
  double lr = 1e-3;
  int batch_size = 64;
  bool operator==(const QatSpec&) const = default;
};

struct AblateSpec {
  std::vector<double> ratios{0.1, 0.3, 0.5, 0.7, 0.9};
  Index max_pool = 20000;
  bool operator==(const AblateSpec&) const = default;
};

struct TransferSpec {
  std::vector<nn::Architecture> archs{nn::Architecture::tiny_cnn, nn::Architecture::tiny_vit};
  bool operator==(const TransferSpec&) const = default;
};

struct GenSpec {
  std::string endpoint;
  int parallel = 4;
  double timeout_seconds = 60.0;
  double guidance_scale = 3.5;
  int steps = 50;
  bool fallback = true;  // use the procedural source when the service fails
  bool operator==(const GenSpec&) const = default;
};

struct PathSpec {
  std::string out = "runs/default";
  std::string cache;  // defaults to <out>/cache
  bool operator==(const PathSpec&) const = default;
};

enum class Mode { ptq, qat };

struct ExperimentConfig {
  static constexpr int kVersion = 1;

  std::string experiment = "default";
  nn::Architecture arch = nn::Architecture::tiny_cnn;
  Mode mode = Mode::ptq;
  std::vector<std::uint64_t> seeds{0};
  TrainSpec train;
  Index eval_samples = 1000;
  PoolSpec pool;
  FilterSpec filter;
  QuantSpec quant;
  QatSpec qat;
  AblateSpec ablate;
  TransferSpec transfer;
  GenSpec gen;
  PathSpec paths;
  double budget_seconds = 600.0;

  bool operator==(const ExperimentConfig&) const = default;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  [[nodiscard]] std::string cache_dir() const;
};

/// Parses a JSON config. Missing fields take defaults; unknown keys, wrong
/// types and a missing or unsupported `version` are ConfigErrors.
ExperimentConfig parse_config(std::string_view json);
ExperimentConfig load_config(const std::string& path);
std::string serialize_config(const ExperimentConfig& config);

}  // namespace genq::harness
