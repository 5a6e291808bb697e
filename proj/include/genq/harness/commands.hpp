// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "genq/harness/config.hpp"
#include "genq/harness/report.hpp"

namespace genq::harness {

// Each command loops over config.seeds, writes its artifacts under
// config.paths.out and returns the rows it produced. Nothing is appended to the
// report files here; run_command does that.
Report cmd_train(const ExperimentConfig& config);
Report cmd_synth(const ExperimentConfig& config);
Report cmd_filter(const ExperimentConfig& config);
Report cmd_ptq(const ExperimentConfig& config);
Report cmd_qat(const ExperimentConfig& config);
Report cmd_ablate(const ExperimentConfig& config);
Report cmd_transfer(const ExperimentConfig& config);

const std::vector<std::string>& command_names();

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

ExperimentConfig apply_overrides(ExperimentConfig config, const Overrides& overrides);

/// Runs a command by name, appends its rows to <out>/report.csv and
/// <out>/timing.csv, and enforces config.budget_seconds (Error when exceeded,
/// after the rows are written).
Report run_command(std::string_view name, const ExperimentConfig& config);

}  // namespace genq::harness
