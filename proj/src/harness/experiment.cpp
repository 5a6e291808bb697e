// SPDX-License-Identifier: Apache-2.0
#include "genq/harness/experiment.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <numeric>

#include <unistd.h>

#include "genq/common/binary_io.hpp"
#include "genq/common/error.hpp"
#include "genq/common/rng.hpp"
#include "genq/datasrc/external.hpp"
#include "genq/datasrc/prompt.hpp"
#include "genq/datasrc/synth.hpp"
#include "genq/nnkit/serialize.hpp"
#include "genq/nnkit/train.hpp"
#include "genq/quant/reconstruct.hpp"

namespace genq::harness {
namespace {

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

data::Dataset external_images(const ExperimentConfig& config, Index count, std::uint64_t seed) {
  const auto names = data::default_class_names();
  std::vector<data::GenRequest> requests;
  std::vector<int> labels;
  for (Index i = 0; i < count; ++i) {
    const int k = static_cast<int>(i % data::kNumClasses);
    const std::uint64_t s = Rng(seed).split("external").split(static_cast<std::uint64_t>(i)).next_u64();
    data::GenRequest req;
    req.prompt = data::build_prompt(data::sample_prompt(names[static_cast<std::size_t>(k)], s));
    req.seed = s;
    req.guidance_scale = config.gen.guidance_scale;
    req.steps = config.gen.steps;
    requests.push_back(std::move(req));
    labels.push_back(k);
  }
  data::ExternalOptions opts;
  opts.endpoint = data::resolve_endpoint(config.gen.endpoint);
  opts.parallel = config.gen.parallel;
  opts.timeout_seconds = config.gen.timeout_seconds;
  if (opts.endpoint.empty()) throw TransportError("pool.source is external but no endpoint is configured");
  return data::generate_many(requests, labels, opts);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) { return Rng(seed).split(stream).next_u64(); }

data::Dataset train_set(const ExperimentConfig& config, std::uint64_t seed) {
  return data::synth_balanced(config.train.samples, derive_seed(seed, "train"));
}

data::Dataset eval_set(const ExperimentConfig& config, std::uint64_t seed) {
  return data::synth_balanced(config.eval_samples, derive_seed(seed, "eval"));
}

Baseline baseline(const ExperimentConfig& config, nn::Architecture arch, std::uint64_t seed, bool retrain) {
  const auto& t = config.train;
  const std::string key = std::string(nn::to_string(arch)) + "|" + std::to_string(t.samples) + "|" +
                          std::to_string(t.epochs) + "|" + std::to_string(t.lr) + "|" + std::to_string(t.batch_size) +
                          "|" + std::to_string(seed);
  const std::string dir = config.cache_dir();
  const std::string path =
      dir + "/" + std::string(nn::to_string(arch)) + "_seed" + std::to_string(seed) + "_" + hex(io::fnv1a(key)) + ".gqm";
  if (!retrain && std::filesystem::exists(path)) {
    return Baseline{nn::load_model(path), {}, path};
  }
  const data::Dataset train = train_set(config, seed);
  nn::TrainOptions opts;
  opts.epochs = t.epochs;
  opts.lr = t.lr;
  opts.batch_size = t.batch_size;
  opts.seed = derive_seed(seed, "train.order");
  auto result = nn::train_float(nn::Model::create(arch, derive_seed(seed, "init")), train.images, train.labels, opts);
  std::filesystem::create_directories(dir);
  // Write then rename so a concurrent reader never sees a partial model.
  const std::string tmp = path + ".tmp" + std::to_string(::getpid());
  nn::save_model(result.model, tmp);
  std::filesystem::rename(tmp, path);
  return Baseline{std::move(result.model), std::move(result.epoch_loss), path};
}

Pool make_pool(const ExperimentConfig& config, Index n_gen, std::uint64_t seed) {
  const auto n_corrupt = static_cast<Index>(std::llround(static_cast<double>(n_gen) * config.pool.corrupt_fraction));
  const Index n_clean = n_gen - n_corrupt;
  Pool pool;
  std::vector<data::Dataset> parts;
  if (n_clean > 0) {
    data::Dataset clean;
    if (config.pool.source == "external") {
      try {
        clean = external_images(config, n_clean, derive_seed(seed, "pool.clean"));
        pool.external = true;
      } catch (const TransportError& e) {
        if (!config.gen.fallback) throw;
        pool.warnings.push_back(std::string("external generation failed, using procedural images: ") + e.what());
      }
    }
    if (!pool.external) clean = data::synth_balanced(n_clean, derive_seed(seed, "pool.clean"));
    parts.push_back(std::move(clean));
  }
  if (n_corrupt > 0) {
    parts.push_back(data::corrupt(data::synth_balanced(n_corrupt, derive_seed(seed, "pool.corrupt")),
                                  config.pool.severity, derive_seed(seed, "pool.severity")));
  }
  const data::Dataset joined = data::concat(parts);
  std::vector<Index> order(static_cast<std::size_t>(n_gen));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "pool.order"));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
  pool.data = joined.subset(order);
  pool.data.provenance = pool.external ? data::Provenance::external : data::Provenance::synthetic;
  for (const Index row : order) pool.clean.push_back(row < n_clean);
  return pool;
}

double kept_clean_fraction(const Pool& pool, const filter::FilterReport& report) {
  const auto rows = report.kept_rows();
  if (rows.empty()) return 0.0;
  std::size_t clean = 0;
  for (const Index r : rows) clean += pool.clean[static_cast<std::size_t>(r)];
  return static_cast<double>(clean) / static_cast<double>(rows.size());
}

data::Dataset calibration_set(const Pool& pool, const filter::FilterReport& report, Index n_keep) {
  auto rows = report.kept_rows();
  if (rows.empty()) throw ContractError("filtering kept no samples");
  if (static_cast<Index>(rows.size()) > n_keep) rows.resize(static_cast<std::size_t>(n_keep));
  return pool.data.subset(rows);
}

filter::PipelineOptions pipeline_options(const ExperimentConfig& config, int threads) {
  filter::PipelineOptions o;
  o.r1 = config.filter.r1;
  o.r2 = config.filter.r2;
  o.alpha = config.filter.alpha;
  o.form = config.filter.energy_form;
  o.bn_batch = config.filter.bn_batch;
  o.threads = threads;
  return o;
}

PtqOutcome run_ptq(const nn::Model& model, const data::Dataset& calib, const QuantSpec& spec,
                   const data::Dataset& eval, std::uint64_t seed) {
  const quant::QuantizedModel calibrated =
      quant::calibrate_activations(quant::calibrate_weights(model, spec.w_bits, spec.a_bits), calib.images);
  quant::ReconstructOptions opts;
  opts.iters = spec.iters;
  opts.lr = spec.lr;
  opts.lambda = spec.lambda;
  opts.batch_size = spec.batch_size;
  opts.seed = derive_seed(seed, "reconstruct");
  PtqOutcome out{quant::reconstruct_model(calibrated, calib.images, opts), 0.0, 0.0};
  out.calibrated_accuracy = quant::evaluate(calibrated, eval);
  out.accuracy = quant::evaluate(out.model, eval);
  return out;
}

Index pool_size_for(Index n_keep, double r1, double r2) {
  // Margin for the per-batch ceil() in the BN stage.
  return static_cast<Index>(std::ceil(static_cast<double>(n_keep) / ((1.0 - r1) * (1.0 - r2)) - 1e-9)) + 16;
}

int threads_from_env() {
  const char* v = std::getenv("GENQ_THREADS");
  if (v == nullptr || *v == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 256) throw ConfigError(std::string("GENQ_THREADS must be 1..256, got '") + v + "'");
  return static_cast<int>(n);
}

}  // namespace genq::harness
