// SPDX-License-Identifier: Apache-2.0
#include "genq/harness/config.hpp"

#include <json.hpp>

#include "genq/common/binary_io.hpp"
#include "genq/common/error.hpp"

namespace genq::harness {
namespace {

using nlohmann::json;

std::string_view mode_name(Mode m) { return m == Mode::ptq ? "ptq" : "qat"; }

/// Walks one JSON object, remembering which keys were read so the rest can
/// be rejected.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) throw ConfigError("");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  template <typename Fn>
  void object(const char* key, Fn&& fn) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    ObjectReader sub(j_.at(key), where(key));
    fn(sub);
    sub.finish();
  }

  const json* raw(const char* key) {
    seen_.push_back(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
        throw ConfigError("unknown key " + where(key));
      }
    }
  }

  [[nodiscard]] std::string where(std::string_view key) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

nn::Architecture arch_from(const std::string& name, const std::string& where) {
  try {
    return nn::parse_architecture(name);
  } catch (const Error&) {
    throw ConfigError(where + ": unknown architecture '" + name + "'");
  }
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

void ExperimentConfig::validate() const {
  require(!experiment.empty(), "experiment must be non-empty");
  require(experiment.find_first_of(",\n\r\"") == std::string::npos, "experiment may not contain commas, quotes or newlines");
  require(!seeds.empty(), "seeds must list at least one seed");
  require(train.samples >= 10, "train.samples must be at least 10");
  require(train.epochs >= 0, "train.epochs must be non-negative");
  require(train.lr > 0, "train.lr must be positive");
  require(train.batch_size >= 2, "train.batch_size must be at least 2");
  require(eval_samples >= 10, "eval_samples must be at least 10");
  require(pool.n_gen >= 2, "pool.n_gen must be at least 2");
  require(pool.corrupt_fraction >= 0 && pool.corrupt_fraction < 1, "pool.corrupt_fraction must lie in [0, 1)");
  require(pool.severity >= 1 && pool.severity <= 5, "pool.severity must lie in 1..5");
  require(pool.source == "synthetic" || pool.source == "external", "pool.source must be synthetic or external");
  require(filter.r1 >= 0 && filter.r1 < 1, "filter.r1 must lie in [0, 1)");
  require(filter.r2 >= 0 && filter.r2 < 1, "filter.r2 must lie in [0, 1)");
  require(filter.alpha > 0, "filter.alpha must be positive");
  require(filter.bn_batch >= 2, "filter.bn_batch must be at least 2");
  for (const int b : {quant.w_bits, quant.a_bits}) {
    require(b == 2 || b == 3 || b == 4 || b == 8, "quant bits must be one of 2, 3, 4, 8");
  }
  require(quant.n_keep >= 1, "quant.n_keep must be positive");
  const double expected = static_cast<double>(pool.n_gen) * (1 - filter.r1) * (1 - filter.r2) + 1;
  require(static_cast<double>(quant.n_keep) <= expected,
          "quant.n_keep = " + std::to_string(quant.n_keep) + " exceeds what the pool yields after filtering (" +
              std::to_string(static_cast<long long>(expected)) + ")");
  require(quant.iters >= 0, "quant.iters must be non-negative");
  require(quant.lr > 0 && quant.lambda >= 0 && quant.batch_size >= 1, "quant optimizer settings out of range");
  require(qat.epochs >= 0 && qat.lr > 0 && qat.batch_size >= 2, "qat settings out of range");
  require(qat.n_train >= qat.batch_size, "qat.n_train must be at least qat.batch_size");
  require(!ablate.ratios.empty(), "ablate.ratios must be non-empty");
  for (const double r : ablate.ratios) require(r >= 0 && r < 1, "ablate.ratios must lie in [0, 1)");
  require(transfer.archs.size() == 2, "transfer.archs must name exactly two architectures");
  require(gen.parallel >= 1 && gen.timeout_seconds > 0 && gen.guidance_scale > 0 && gen.steps > 0,
          "gen settings out of range");
  require(!paths.out.empty(), "paths.out must be non-empty");
  require(budget_seconds > 0, "budget_seconds must be positive");
}

std::string ExperimentConfig::cache_dir() const { return paths.cache.empty() ? paths.out + "/cache" : paths.cache; }

ExperimentConfig parse_config(std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  ObjectReader r(root, "");
  int version = 0;
  if (!root.is_object() || !root.contains("version")) throw ConfigError("config needs a top-level version field");
  r.get("version", version);
  if (version != ExperimentConfig::kVersion) {
    throw ConfigError("unsupported config version " + std::to_string(version));
  }
  r.get("experiment", c.experiment);
  std::string arch(nn::to_string(c.arch));
  r.get("arch", arch);
  c.arch = arch_from(arch, "arch");
  std::string mode(mode_name(c.mode));
  r.get("mode", mode);
  if (mode != "ptq" && mode != "qat") throw ConfigError("mode must be ptq or qat");
  c.mode = mode == "ptq" ? Mode::ptq : Mode::qat;
  if (const json* seeds = r.raw("seeds")) {
    if (!seeds->is_array()) throw ConfigError("seeds must be an array");
    c.seeds.clear();
    for (const auto& s : *seeds) {
      if (!s.is_number_unsigned()) throw ConfigError("seeds must be non-negative integers");
      c.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  r.object("train", [&](ObjectReader& o) {
    o.get("samples", c.train.samples);
    o.get("epochs", c.train.epochs);
    o.get("lr", c.train.lr);
    o.get("batch_size", c.train.batch_size);
  });
  r.get("eval_samples", c.eval_samples);
  r.object("pool", [&](ObjectReader& o) {
    o.get("n_gen", c.pool.n_gen);
    o.get("corrupt_fraction", c.pool.corrupt_fraction);
    o.get("severity", c.pool.severity);
    o.get("source", c.pool.source);
  });
  r.object("filter", [&](ObjectReader& o) {
    o.get("r1", c.filter.r1);
    o.get("r2", c.filter.r2);
    o.get("alpha", c.filter.alpha);
    std::string form(filter::to_string(c.filter.energy_form));
    o.get("energy_form", form);
    try {
      c.filter.energy_form = filter::parse_energy_form(form);
    } catch (const Error& e) {
      throw ConfigError(std::string("filter.energy_form: ") + e.what());
    }
    o.get("bn_batch", c.filter.bn_batch);
  });
  r.object("quant", [&](ObjectReader& o) {
    o.get("w_bits", c.quant.w_bits);
    o.get("a_bits", c.quant.a_bits);
    o.get("n_keep", c.quant.n_keep);
    o.get("iters", c.quant.iters);
    o.get("lr", c.quant.lr);
    o.get("lambda", c.quant.lambda);
    o.get("batch_size", c.quant.batch_size);
  });
  r.object("qat", [&](ObjectReader& o) {
    o.get("n_train", c.qat.n_train);
    o.get("epochs", c.qat.epochs);
    o.get("lr", c.qat.lr);
    o.get("batch_size", c.qat.batch_size);
  });
  r.object("ablate", [&](ObjectReader& o) {
    o.get("ratios", c.ablate.ratios);
    o.get("max_pool", c.ablate.max_pool);
  });
  r.object("transfer", [&](ObjectReader& o) {
    std::vector<std::string> names;
    for (const auto a : c.transfer.archs) names.emplace_back(nn::to_string(a));
    o.get("archs", names);
    c.transfer.archs.clear();
    for (const auto& n : names) c.transfer.archs.push_back(arch_from(n, "transfer.archs"));
  });
  r.object("gen", [&](ObjectReader& o) {
    o.get("endpoint", c.gen.endpoint);
    o.get("parallel", c.gen.parallel);
    o.get("timeout_seconds", c.gen.timeout_seconds);
    o.get("guidance_scale", c.gen.guidance_scale);
    o.get("steps", c.gen.steps);
    o.get("fallback", c.gen.fallback);
  });
  r.object("paths", [&](ObjectReader& o) {
    o.get("out", c.paths.out);
    o.get("cache", c.paths.cache);
  });
  r.get("budget_seconds", c.budget_seconds);
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const Error& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  return parse_config(text);
}

std::string serialize_config(const ExperimentConfig& c) {
  std::vector<std::string> archs;
  for (const auto a : c.transfer.archs) archs.emplace_back(nn::to_string(a));
  const nlohmann::ordered_json j = {
      {"version", ExperimentConfig::kVersion},
      {"experiment", c.experiment},
      {"arch", std::string(nn::to_string(c.arch))},
      {"mode", std::string(mode_name(c.mode))},
      {"seeds", c.seeds},
      {"train", {{"samples", c.train.samples}, {"epochs", c.train.epochs}, {"lr", c.train.lr},
                 {"batch_size", c.train.batch_size}}},
      {"eval_samples", c.eval_samples},
      {"pool", {{"n_gen", c.pool.n_gen}, {"corrupt_fraction", c.pool.corrupt_fraction},
                {"severity", c.pool.severity}, {"source", c.pool.source}}},
      {"filter", {{"r1", c.filter.r1}, {"r2", c.filter.r2}, {"alpha", c.filter.alpha},
                  {"energy_form", std::string(filter::to_string(c.filter.energy_form))},
                  {"bn_batch", c.filter.bn_batch}}},
      {"quant", {{"w_bits", c.quant.w_bits}, {"a_bits", c.quant.a_bits}, {"n_keep", c.quant.n_keep},
                 {"iters", c.quant.iters}, {"lr", c.quant.lr}, {"lambda", c.quant.lambda},
                 {"batch_size", c.quant.batch_size}}},
      {"qat", {{"n_train", c.qat.n_train}, {"epochs", c.qat.epochs}, {"lr", c.qat.lr}, {"batch_size", c.qat.batch_size}}},
      {"ablate", {{"ratios", c.ablate.ratios}, {"max_pool", c.ablate.max_pool}}},
      {"transfer", {{"archs", archs}}},
      {"gen", {{"endpoint", c.gen.endpoint}, {"parallel", c.gen.parallel},
               {"timeout_seconds", c.gen.timeout_seconds}, {"guidance_scale", c.gen.guidance_scale},
               {"steps", c.gen.steps}, {"fallback", c.gen.fallback}}},
      {"paths", {{"out", c.paths.out}, {"cache", c.paths.cache}}},
      {"budget_seconds", c.budget_seconds},
  };
  return j.dump(2) + "\n";
}

}  // namespace genq::harness
