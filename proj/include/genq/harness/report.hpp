// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace genq::harness {

inline constexpr const char* kReportHeader = "experiment,seed,stage,metric,value";
inline constexpr const char* kTimingHeader = "experiment,seed,stage,seconds";

struct ReportRow {
  std::string experiment;
  std::uint64_t seed = 0;
  std::string stage;
  std::string metric;
  double value = 0.0;
  double seconds = 0.0;  // wall clock, kept out of the deterministic report
};

/// Rows of one command run. Values are written with 17 significant digits
/// so identical runs give identical bytes.
class Report {
 public:
  explicit Report(std::string experiment) : experiment_(std::move(experiment)) {}

  void add(std::uint64_t seed, std::string stage, std::string metric, double value, double seconds = 0.0);
  [[nodiscard]] const std::vector<ReportRow>& rows() const noexcept { return rows_; }
  [[nodiscard]] std::vector<ReportRow> rows_for(std::string_view stage) const;

  [[nodiscard]] std::string csv() const;         // without header
  [[nodiscard]] std::string timing_csv() const;  // without header

  /// Appends this run's rows to <dir>/report.csv and <dir>/timing.csv in a
  /// single write each, creating the files with their headers if needed.
  void append_to(const std::string& dir) const;

 private:
  std::string experiment_;
  std::vector<ReportRow> rows_;
};

std::string format_value(double v);

/// Parses and checks a report file: exact header, five fields per row,
/// integer seed, finite numeric value. Throws FormatError on the first bad row.
std::vector<ReportRow> read_report(const std::string& path);

}  // namespace genq::harness
