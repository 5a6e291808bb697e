// SPDX-License-Identifier: Apache-2.0
#include "genq/harness/commands.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>

#include "genq/common/error.hpp"
#include "genq/harness/experiment.hpp"
#include "genq/nnkit/serialize.hpp"
#include "genq/quant/qat.hpp"
#include "genq/quant/serialize.hpp"

namespace genq::harness {
namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string arch_name(nn::Architecture a) { return std::string(nn::to_string(a)); }

std::string artifact(const ExperimentConfig& c, const std::string& stem, std::uint64_t seed, const std::string& ext) {
  return c.paths.out + "/" + stem + "_seed" + std::to_string(seed) + ext;
}

std::string ratio_label(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", r);
  return buf;
}

struct Filtered {
  Pool pool;
  filter::FilterReport report;
  data::Dataset calib;
};

Filtered filtered_calibration(const ExperimentConfig& c, const nn::Model& filter_model, Index n_gen, double r1,
                              double r2, std::uint64_t seed, Index n_keep = 0) {
  Filtered f;
  f.pool = make_pool(c, n_gen, seed);
  auto opts = pipeline_options(c, threads_from_env());
  opts.r1 = r1;
  opts.r2 = r2;
  f.report = filter::run_pipeline(f.pool.data, filter_model, opts);
  f.calib = calibration_set(f.pool, f.report, n_keep > 0 ? n_keep : c.quant.n_keep);
  return f;
}

void warn(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
}

// Training images for QAT: a separate pool, filtered by the same model and ratios.
data::Dataset qat_set(const ExperimentConfig& c, const nn::Model& filter_model, double r1, double r2,
                      std::uint64_t seed) {
  const Index n = c.qat.n_train;
  return filtered_calibration(c, filter_model, pool_size_for(n, r1, r2), r1, r2, derive_seed(seed, "qat.pool"), n).calib;
}

quant::QatOptions qat_options(const ExperimentConfig& c, std::uint64_t seed) {
  quant::QatOptions q;
  q.epochs = c.qat.epochs;
  q.lr = c.qat.lr;
  q.batch_size = c.qat.batch_size;
  q.seed = derive_seed(seed, "qat");
  return q;
}

// PTQ, followed by QAT when the config asks for it.
double quantized_accuracy(const ExperimentConfig& c, const nn::Model& model, const nn::Model& filter_model,
                          const data::Dataset& calib, const data::Dataset& eval, std::uint64_t seed, double r1,
                          double r2) {
  PtqOutcome ptq = run_ptq(model, calib, c.quant, eval, seed);
  if (c.mode == Mode::ptq) return ptq.accuracy;
  const data::Dataset train = qat_set(c, filter_model, r1, r2, seed);
  return quant::evaluate(quant::qat_finetune(std::move(ptq.model), train, qat_options(c, seed)).model, eval);
}

}  // namespace

Report cmd_train(const ExperimentConfig& c) {
  Report rep(c.experiment);
  std::filesystem::create_directories(c.paths.out);
  for (const std::uint64_t seed : c.seeds) {
    const auto t0 = Clock::now();
    Baseline b = baseline(c, c.arch, seed, true);
    nn::save_model(b.model, artifact(c, "model_" + arch_name(c.arch), seed, ".gqm"));
    const double seconds = since(t0);
    for (std::size_t e = 0; e < b.epoch_loss.size(); ++e) {
      rep.add(seed, "train", "loss_epoch_" + std::to_string(e + 1), b.epoch_loss[e]);
    }
    rep.add(seed, "train", "float_accuracy", quant::evaluate(b.model, eval_set(c, seed)), seconds);
  }
  return rep;
}

Report cmd_synth(const ExperimentConfig& c) {
  Report rep(c.experiment);
  std::filesystem::create_directories(c.paths.out);
  for (const std::uint64_t seed : c.seeds) {
    const auto t0 = Clock::now();
    const Pool pool = make_pool(c, c.pool.n_gen, seed);
    warn(pool.warnings);
    data::save_dataset(pool.data, artifact(c, "pool", seed, ".gqd"));
    std::size_t clean = 0;
    for (const bool b : pool.clean) clean += b;
    rep.add(seed, "synth", "pool_size", static_cast<double>(pool.data.size()), since(t0));
    rep.add(seed, "synth", "clean_fraction", static_cast<double>(clean) / static_cast<double>(pool.clean.size()));
    rep.add(seed, "synth", "external", pool.external ? 1.0 : 0.0);
  }
  return rep;
}

Report cmd_filter(const ExperimentConfig& c) {
  Report rep(c.experiment);
  std::filesystem::create_directories(c.paths.out);
  for (const std::uint64_t seed : c.seeds) {
    const Baseline b = baseline(c, c.arch, seed);
    const auto t0 = Clock::now();
    const Pool pool = make_pool(c, c.pool.n_gen, seed);
    warn(pool.warnings);
    const auto report = filter::run_pipeline(pool.data, b.model, pipeline_options(c, threads_from_env()));
    const double seconds = since(t0);
    filter::write_report_csv(report, artifact(c, "filter", seed, ".csv"));
    filter::write_report_json(report, artifact(c, "filter", seed, ".json"));
    filter::write_manifest(report, artifact(c, "manifest", seed, ".txt"));
    rep.add(seed, "filter", "pool_size", static_cast<double>(pool.data.size()), seconds);
    rep.add(seed, "filter", "kept", static_cast<double>(report.kept_ids().size()));
    rep.add(seed, "filter", "kept_clean_fraction", kept_clean_fraction(pool, report));
    if (report.stage2 == filter::SecondStage::patch_entropy) {
      rep.add(seed, "filter", "mean_bandwidth", report.mean_bandwidth);
    }
  }
  return rep;
}

Report cmd_ptq(const ExperimentConfig& c) {
  Report rep(c.experiment);
  std::filesystem::create_directories(c.paths.out);
  for (const std::uint64_t seed : c.seeds) {
    const Baseline b = baseline(c, c.arch, seed);
    const data::Dataset eval = eval_set(c, seed);
    auto t0 = Clock::now();
    const Filtered f = filtered_calibration(c, b.model, c.pool.n_gen, c.filter.r1, c.filter.r2, seed);
    warn(f.pool.warnings);
    rep.add(seed, "ptq", "calib_size", static_cast<double>(f.calib.size()), since(t0));
    rep.add(seed, "ptq", "float_accuracy", quant::evaluate(b.model, eval));
    t0 = Clock::now();
    const PtqOutcome out = run_ptq(b.model, f.calib, c.quant, eval, seed);
    quant::save_quantized(out.model, artifact(c, "ptq_" + arch_name(c.arch), seed, ".gqq"));
    rep.add(seed, "ptq", "calibrated_accuracy", out.calibrated_accuracy);
    rep.add(seed, "ptq", "ptq_accuracy", out.accuracy, since(t0));
  }
  return rep;
}

Report cmd_qat(const ExperimentConfig& c) {
  Report rep(c.experiment);
  std::filesystem::create_directories(c.paths.out);
  for (const std::uint64_t seed : c.seeds) {
    const Baseline b = baseline(c, c.arch, seed);
    const data::Dataset eval = eval_set(c, seed);
    auto t0 = Clock::now();
    const Filtered f = filtered_calibration(c, b.model, c.pool.n_gen, c.filter.r1, c.filter.r2, seed);
    warn(f.pool.warnings);
    PtqOutcome ptq = run_ptq(b.model, f.calib, c.quant, eval, seed);
    rep.add(seed, "qat", "ptq_accuracy", ptq.accuracy, since(t0));
    t0 = Clock::now();
    const data::Dataset train = qat_set(c, b.model, c.filter.r1, c.filter.r2, seed);
    rep.add(seed, "qat", "train_size", static_cast<double>(train.size()));
    const quant::QatResult r = quant::qat_finetune(std::move(ptq.model), train, qat_options(c, seed));
    quant::save_quantized(r.model, artifact(c, "qat_" + arch_name(c.arch), seed, ".gqq"));
    for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
      rep.add(seed, "qat", "loss_epoch_" + std::to_string(e + 1), r.epoch_loss[e]);
    }
    rep.add(seed, "qat", "qat_accuracy", quant::evaluate(r.model, eval), since(t0));
  }
  return rep;
}

Report cmd_ablate(const ExperimentConfig& c) {
  const bool vit = c.arch == nn::Architecture::tiny_vit;
  const std::string second = vit ? "patch" : "bn";
  // Check every pool size before spending time on any of them.
  for (const double r : c.ablate.ratios) {
    for (const bool energy_stage : {true, false}) {
      const Index n = energy_stage ? pool_size_for(c.quant.n_keep, r, c.filter.r2)
                                   : pool_size_for(c.quant.n_keep, c.filter.r1, r);
      if (n > c.ablate.max_pool) {
        throw ConfigError("ablate.max_pool: r=" + ratio_label(r) + " needs a pool of " + std::to_string(n) +
                          " images, more than " + std::to_string(c.ablate.max_pool));
      }
    }
  }
  Report rep(c.experiment);
  for (const std::uint64_t seed : c.seeds) {
    const Baseline b = baseline(c, c.arch, seed);
    const data::Dataset eval = eval_set(c, seed);
    for (const bool energy_stage : {true, false}) {
      const std::string stage = "ablate_" + (energy_stage ? std::string("energy") : second);
      for (const double r : c.ablate.ratios) {
        const auto t0 = Clock::now();
        const double r1 = energy_stage ? r : c.filter.r1;
        const double r2 = energy_stage ? c.filter.r2 : r;
        const Filtered f = filtered_calibration(c, b.model, pool_size_for(c.quant.n_keep, r1, r2), r1, r2, seed);
        const double acc = quantized_accuracy(c, b.model, b.model, f.calib, eval, seed, r1, r2);
        rep.add(seed, stage, "accuracy@r=" + ratio_label(r), acc, since(t0));
        rep.add(seed, stage + "_audit", "kept_clean_fraction@r=" + ratio_label(r), kept_clean_fraction(f.pool, f.report));
      }
    }
  }
  return rep;
}

Report cmd_transfer(const ExperimentConfig& c) {
  Report rep(c.experiment);
  const auto& archs = c.transfer.archs;
  for (const std::uint64_t seed : c.seeds) {
    std::vector<nn::Model> models;
    for (const auto a : archs) models.push_back(baseline(c, a, seed).model);
    const data::Dataset eval = eval_set(c, seed);
    const Pool pool = make_pool(c, c.pool.n_gen, seed);
    warn(pool.warnings);
    // acc[a][b]: filtered by archs[a], quantized archs[b].
    std::vector<std::vector<double>> acc(archs.size(), std::vector<double>(archs.size()));
    for (std::size_t a = 0; a < archs.size(); ++a) {
      const auto report = filter::run_pipeline(pool.data, models[a], pipeline_options(c, threads_from_env()));
      const data::Dataset calib = calibration_set(pool, report, c.quant.n_keep);
      for (std::size_t q = 0; q < archs.size(); ++q) {
        const auto t0 = Clock::now();
        acc[a][q] = quantized_accuracy(c, models[q], models[a], calib, eval, seed, c.filter.r1,
                                       c.filter.r2);
        rep.add(seed, "transfer", "filter=" + arch_name(archs[a]) + ";quant=" + arch_name(archs[q]), acc[a][q],
                since(t0));
      }
    }
    for (std::size_t q = 0; q < archs.size(); ++q) {
      for (std::size_t a = 0; a < archs.size(); ++a) {
        if (a == q) continue;
        rep.add(seed, "transfer", "drop:filter=" + arch_name(archs[a]) + ";quant=" + arch_name(archs[q]),
                acc[q][q] - acc[a][q]);
      }
    }
  }
  return rep;
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"train", "synth", "filter", "ptq", "qat", "ablate", "transfer"};
  return names;
}

ExperimentConfig apply_overrides(ExperimentConfig config, const Overrides& overrides) {
  if (overrides.seed) config.seeds = {*overrides.seed};
  if (overrides.out) config.paths.out = *overrides.out;
  config.validate();
  return config;
}

Report run_command(std::string_view name, const ExperimentConfig& config) {
  static const std::map<std::string, std::function<Report(const ExperimentConfig&)>, std::less<>> table{
      {"train", cmd_train}, {"synth", cmd_synth},   {"filter", cmd_filter},     {"ptq", cmd_ptq},
      {"qat", cmd_qat},     {"ablate", cmd_ablate}, {"transfer", cmd_transfer},
  };
  const auto it = table.find(name);
  if (it == table.end()) throw ConfigError("unknown command '" + std::string(name) + "'");
  config.validate();
  const auto t0 = Clock::now();
  Report rep = it->second(config);
  const double seconds = since(t0);
  rep.append_to(config.paths.out);
  if (seconds > config.budget_seconds) {
    throw Error(std::string(name) + " took " + std::to_string(seconds) + " s, over the " +
                std::to_string(config.budget_seconds) + " s budget");
  }
  return rep;
}

}  // namespace genq::harness
