// SPDX-License-Identifier: Apache-2.0
#include "genq/filter/pipeline.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "genq/common/binary_io.hpp"
#include "genq/common/error.hpp"
#include "genq/nnkit/serialize.hpp"

namespace genq::filter {
namespace {

// Guards ceil() against 1 - 0.7 = 0.30000000000000004 style artefacts.
constexpr double kRatioSlack = 1e-9;

void check_ratio(double r, const char* what) {
  if (!(r >= 0.0 && r < 1.0)) {
    throw ContractError(std::string(what) + ": ratio must lie in [0, 1), got " + std::to_string(r));
  }
}

void check_scores(std::span<const double> scores, std::span<const std::uint64_t> ids) {
  if (scores.size() != ids.size()) throw ContractError("selection: one id per score required");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw ScoringError("sample " + std::to_string(ids[i]) + " has no score");
  }
}

std::vector<bool> keep_per_class(std::span<const double> scores, std::span<const int> labels,
                                 std::span<const std::uint64_t> ids, double r, bool lowest) {
  check_ratio(r, "filter");
  check_scores(scores, ids);
  if (labels.size() != scores.size()) throw ContractError("selection: one label per score required");
  std::map<int, std::vector<std::size_t>> classes;
  for (std::size_t i = 0; i < scores.size(); ++i) classes[labels[i]].push_back(i);
  std::vector<bool> kept(scores.size(), false);
  for (auto& [label, members] : classes) {
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return lowest ? scores[a] < scores[b] : scores[a] > scores[b];
      return ids[a] < ids[b];
    });
    const auto k = static_cast<std::size_t>(keep_count(static_cast<Index>(members.size()), r));
    for (std::size_t j = 0; j < k; ++j) kept[members[j]] = true;
  }
  return kept;
}

// Consecutive batches; a trailing single sample joins the previous batch
// because leave-one-out is undefined for it.
std::vector<std::pair<std::size_t, std::size_t>> batch_bounds(std::size_t n, Index batch) {
  if (batch < 2) throw ContractError("batch size must be at least 2");
  const auto b = static_cast<std::size_t>(batch);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t first = 0; first < n; first += b) out.emplace_back(first, std::min(n, first + b));
  if (out.size() > 1 && out.back().second - out.back().first == 1) {
    out.pop_back();
    out.back().second = n;
  }
  return out;
}

std::vector<std::uint64_t> default_ids(std::span<const std::uint64_t> ids, Index n) {
  if (ids.empty()) {
    std::vector<std::uint64_t> out(static_cast<std::size_t>(n));
    std::iota(out.begin(), out.end(), 0);
    return out;
  }
  if (static_cast<Index>(ids.size()) != n) throw ContractError("filter: one id per pool sample required");
  return {ids.begin(), ids.end()};
}

FilterReport base_report(const data::Dataset& pool, std::span<const std::uint64_t> ids) {
  if (pool.size() == 0) throw ContractError("filter: empty pool");
  pool.validate();
  FilterReport report;
  for (Index i = 0; i < pool.size(); ++i) {
    ScoredSample s;
    s.id = ids[static_cast<std::size_t>(i)];
    s.label = pool.labels[static_cast<std::size_t>(i)];
    report.samples.push_back(s);
  }
  return report;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string_view to_string(SecondStage stage) {
  switch (stage) {
    case SecondStage::bn_sensitivity: return "bn_sensitivity";
    case SecondStage::patch_entropy: return "patch_entropy";
    default: return "none";
  }
}

std::vector<std::uint64_t> FilterReport::kept_ids() const {
  std::vector<std::uint64_t> out;
  for (const auto& s : samples) {
    if (s.kept) out.push_back(s.id);
  }
  return out;
}

std::vector<Index> FilterReport::kept_rows() const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].kept) out.push_back(static_cast<Index>(i));
  }
  return out;
}

Index keep_count(Index n, double r) {
  check_ratio(r, "keep_count");
  return std::min(n, static_cast<Index>(std::ceil(static_cast<double>(n) * (1.0 - r) - kRatioSlack)));
}

std::vector<bool> keep_lowest_per_class(std::span<const double> scores, std::span<const int> labels,
                                        std::span<const std::uint64_t> ids, double r) {
  return keep_per_class(scores, labels, ids, r, true);
}

std::vector<bool> keep_highest_per_class(std::span<const double> scores, std::span<const int> labels,
                                         std::span<const std::uint64_t> ids, double r) {
  return keep_per_class(scores, labels, ids, r, false);
}

std::vector<bool> drop_highest_per_batch(std::span<const double> scores, std::span<const std::uint64_t> ids,
                                         double r, Index batch) {
  check_ratio(r, "bn filter");
  check_scores(scores, ids);
  std::vector<bool> kept(scores.size(), true);
  for (const auto& [first, last] : batch_bounds(scores.size(), batch)) {
    std::vector<std::size_t> order(last - first);
    std::iota(order.begin(), order.end(), first);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return ids[a] > ids[b];
    });
    const auto drop = static_cast<std::size_t>(
        std::ceil(static_cast<double>(order.size()) * r - kRatioSlack));
    for (std::size_t j = 0; j < std::min(drop, order.size()); ++j) kept[order[j]] = false;
  }
  return kept;
}

FilterReport energy_filter(std::vector<ScoredSample> pool, double r) {
  if (pool.empty()) throw ContractError("energy_filter: empty pool");
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::uint64_t> ids;
  for (const auto& s : pool) {
    scores.push_back(s.energy);
    labels.push_back(s.label);
    ids.push_back(s.id);
  }
  const auto kept = keep_lowest_per_class(scores, labels, ids, r);
  FilterReport report;
  report.r1 = r;
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i].kept = kept[i];
  report.samples = std::move(pool);
  return report;
}

FilterReport bn_filter(const data::Dataset& pool, std::span<const std::uint64_t> ids, const nn::Model& model,
                       double r, Index batch) {
  if (!model.has_batch_norm()) throw RoutingError("bn_filter: model has no BatchNorm layers; use patch_filter");
  check_ratio(r, "bn_filter");
  const auto all_ids = default_ids(ids, pool.size());
  FilterReport report = base_report(pool, all_ids);
  const auto n = static_cast<std::size_t>(pool.size());
  // A pool smaller than one batch forms a single batch.
  const Index b = std::min<Index>(std::max<Index>(batch, 2), std::max<Index>(pool.size(), 2));
  std::vector<double> scores(n, 0.0);
  if (n >= 2) {
    for (const auto& [first, last] : batch_bounds(n, b)) {
      const auto s = bn_sensitivities(pool.images.slice(static_cast<Index>(first), static_cast<Index>(last - first)), model);
      std::copy(s.begin(), s.end(), scores.begin() + static_cast<std::ptrdiff_t>(first));
    }
  }
  const auto kept = n >= 2 ? drop_highest_per_batch(scores, all_ids, r, b) : std::vector<bool>(n, true);
  for (std::size_t i = 0; i < n; ++i) {
    report.samples[i].stage2_score = scores[i];
    report.samples[i].kept = kept[i];
  }
  report.r2 = r;
  report.stage2 = SecondStage::bn_sensitivity;
  report.bn_batch = b;
  report.model_hash = nn::model_hash(model);
  return report;
}

FilterReport patch_filter(const data::Dataset& pool, std::span<const std::uint64_t> ids, const nn::Model& vit,
                          double r, int threads) {
  if (vit.has_batch_norm()) throw RoutingError("patch_filter: model has BatchNorm layers; use bn_filter");
  check_ratio(r, "patch_filter");
  const auto all_ids = default_ids(ids, pool.size());
  FilterReport report = base_report(pool, all_ids);
  const auto entropies = patch_entropies(vit, pool.images, threads);
  std::vector<double> scores;
  double bandwidth = 0.0;
  for (const auto& e : entropies) {
    scores.push_back(e.value);
    bandwidth += e.bandwidth;
  }
  const auto kept = keep_highest_per_class(scores, pool.labels, all_ids, r);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    report.samples[i].stage2_score = scores[i];
    report.samples[i].kept = kept[i];
  }
  report.r2 = r;
  report.stage2 = SecondStage::patch_entropy;
  report.mean_bandwidth = bandwidth / static_cast<double>(scores.size());
  report.model_hash = nn::model_hash(vit);
  return report;
}

FilterReport run_pipeline(const data::Dataset& pool, const nn::Model& model, const PipelineOptions& options,
                          std::span<const std::uint64_t> ids) {
  const auto all_ids = default_ids(ids, pool.size());
  FilterReport report = base_report(pool, all_ids);
  const auto energies = energy_scores(model, pool.images, options.alpha, options.form, all_ids);
  for (std::size_t i = 0; i < energies.size(); ++i) report.samples[i].energy = energies[i];
  const FilterReport first = energy_filter(report.samples, options.r1);

  const std::vector<Index> rows = first.kept_rows();
  std::vector<std::uint64_t> stage_ids;
  for (const Index row : rows) stage_ids.push_back(all_ids[static_cast<std::size_t>(row)]);
  const data::Dataset survivors = pool.subset(rows);
  const FilterReport second = model.has_batch_norm()
                                  ? bn_filter(survivors, stage_ids, model, options.r2, options.bn_batch)
                                  : patch_filter(survivors, stage_ids, model, options.r2, options.threads);

  for (auto& s : report.samples) s.kept = false;
  for (std::size_t j = 0; j < rows.size(); ++j) {
    ScoredSample& s = report.samples[static_cast<std::size_t>(rows[j])];
    s.stage2_score = second.samples[j].stage2_score;
    s.kept = second.samples[j].kept;
  }
  report.r1 = options.r1;
  report.r2 = options.r2;
  report.alpha = options.alpha;
  report.form = options.form;
  report.stage2 = second.stage2;
  report.bn_batch = second.bn_batch;
  report.mean_bandwidth = second.mean_bandwidth;
  report.model_hash = nn::model_hash(model);
  return report;
}

data::Dataset kept_subset(const data::Dataset& pool, const FilterReport& report) {
  if (static_cast<Index>(report.samples.size()) != pool.size()) {
    throw ContractError("kept_subset: report does not describe this pool");
  }
  return pool.subset(report.kept_rows());
}

void write_report_csv(const FilterReport& report, const std::string& path) {
  std::ostringstream out;
  out << "sample_id,class,energy,stage2_score,kept\n";
  for (const auto& s : report.samples) {
    out << s.id << ',' << s.label << ',' << format_double(s.energy) << ',' << format_double(s.stage2_score) << ','
        << (s.kept ? 1 : 0) << '\n';
  }
  io::write_file(path, out.str());
}

void write_report_json(const FilterReport& report, const std::string& path) {
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016" PRIx64, report.model_hash);
  const nlohmann::ordered_json j = {
      {"r1", report.r1},
      {"r2", report.r2},
      {"alpha", report.alpha},
      {"energy_form", std::string(to_string(report.form))},
      {"stage2", std::string(to_string(report.stage2))},
      {"bn_batch", report.bn_batch},
      {"bandwidth_rule", "scott"},
      {"bandwidth_floor", kMinBandwidth},
      {"bandwidth", report.mean_bandwidth},
      {"model_hash", hash},
      {"pool_size", report.samples.size()},
      {"kept", report.kept_ids().size()},
  };
  io::write_file(path, j.dump(2) + "\n");
}

void write_manifest(const FilterReport& report, const std::string& path) {
  std::string out;
  for (const auto id : report.kept_ids()) out += std::to_string(id) + "\n";
  io::write_file(path, out);
}

std::vector<std::uint64_t> read_manifest(const std::string& path) {
  std::istringstream in(io::read_file(path));
  std::vector<std::uint64_t> ids;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    std::size_t used = 0;
    std::uint64_t id = 0;
    try {
      id = std::stoull(line, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != line.size() || line[0] == '-') {
      throw FormatError(path + ":" + std::to_string(number) + ": not a sample id: '" + line + "'");
    }
    ids.push_back(id);
  }
  return ids;
}

}  // namespace genq::filter
