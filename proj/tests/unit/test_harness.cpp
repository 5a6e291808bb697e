// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "genq/common/error.hpp"
#include "genq/filter/pipeline.hpp"
#include "genq/harness/commands.hpp"
#include "genq/harness/experiment.hpp"

using namespace genq;
using namespace genq::harness;

namespace {

std::string temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("genq_harness_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

// Small enough that every command finishes in seconds.
ExperimentConfig tiny(const std::string& name) {
  ExperimentConfig c;
  c.experiment = name;
  c.seeds = {5};
  c.train.samples = 300;
  c.train.epochs = 1;
  c.eval_samples = 200;
  c.pool.n_gen = 160;
  c.quant.n_keep = 16;
  c.quant.iters = 10;
  c.qat.epochs = 2;
  c.qat.n_train = 64;
  c.ablate.max_pool = 1000;
  c.paths.out = temp_dir(name);
  c.paths.cache = (std::filesystem::temp_directory_path() / "genq_harness_cache").string();
  return c;
}

double value(const Report& rep, const std::string& stage, const std::string& metric) {
  for (const auto& r : rep.rows()) {
    if (r.stage == stage && r.metric == metric) return r.value;
  }
  FAIL("missing row " << stage << "/" << metric);
  return NAN;
}

}  // namespace

TEST_CASE("config round-trip and defaults") {
  const ExperimentConfig defaults = parse_config(R"({"version": 1})");
  CHECK(defaults == ExperimentConfig{});
  CHECK(parse_config(serialize_config(defaults)) == defaults);

  ExperimentConfig c;
  c.experiment = "sweep";
  c.arch = nn::Architecture::tiny_vit;
  c.mode = Mode::qat;
  c.seeds = {1, 2, 18446744073709551615ULL};
  c.filter.r1 = 0.3;
  c.filter.alpha = 0.37;
  c.filter.energy_form = filter::EnergyForm::logsumexp;
  c.quant.w_bits = 2;
  c.quant.a_bits = 8;
  c.ablate.ratios = {0.25, 0.75};
  c.transfer.archs = {nn::Architecture::tiny_vit, nn::Architecture::tiny_cnn};
  c.gen.endpoint = "http://127.0.0.1:9";
  c.paths.cache = "/tmp/x";
  c.budget_seconds = 12.5;
  CHECK(parse_config(serialize_config(c)) == c);
  CHECK(c.cache_dir() == "/tmp/x");
  CHECK(defaults.cache_dir() == "runs/default/cache");
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(parse_config("{}"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"version": 2})"), ConfigError);
  CHECK_THROWS_AS(parse_config("not json"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"version": 1, "bits": 4})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"version": 1, "quant": {"wbits": 4}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"version": 1, "quant": {"w_bits": "4"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"version": 1, "quant": {"w_bits": 5}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"version": 1, "arch": "resnet"})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"version": 1, "seeds": []})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"version": 1, "filter": {"r1": 1.0}})"), ConfigError);
  // Keep count bound: 1024 * 0.5 * 0.5 + 1 = 257.
  CHECK_NOTHROW(parse_config(R"({"version": 1, "quant": {"n_keep": 257}})"));
  CHECK_THROWS_AS(parse_config(R"({"version": 1, "quant": {"n_keep": 258}})"), ConfigError);
  try {
    (void)parse_config(R"({"version": 1, "pool": {"n_gen": 10, "sevrity": 3}})");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("sevrity") != std::string::npos);
  }
  CHECK_THROWS_AS(load_config("/nonexistent/genq.json"), ConfigError);
}

TEST_CASE("report rows and schema check") {
  Report rep("exp");
  rep.add(0, "ptq", "ptq_accuracy", 0.1, 1.5);
  rep.add(7, "ptq", "calib_size", 256);
  CHECK(rep.csv() == "exp,0,ptq,ptq_accuracy,0.10000000000000001\nexp,7,ptq,calib_size,256\n");
  CHECK(rep.rows_for("ptq").size() == 2);
  CHECK_THROWS_AS(rep.add(0, "a,b", "m", 1.0), ContractError);
  CHECK_THROWS_AS(rep.add(0, "s", "m", NAN), NumericError);
  CHECK_THROWS_AS(rep.add(0, "s", "m", INFINITY), NumericError);

  const std::string dir = temp_dir("report");
  rep.append_to(dir);
  rep.append_to(dir);
  const std::string text = slurp(dir + "/report.csv");
  CHECK(text == std::string(kReportHeader) + "\n" + rep.csv() + rep.csv());
  const auto rows = read_report(dir + "/report.csv");
  REQUIRE(rows.size() == 4);
  CHECK(rows[1].seed == 7);
  CHECK(rows[0].value == 0.1);
  CHECK(slurp(dir + "/timing.csv").rfind(kTimingHeader, 0) == 0);

  const std::string bad = dir + "/bad.csv";
  for (const std::string body : {"experiment,seed,stage,metric\n", "experiment,seed,stage,metric,value\ne,0,s,m\n",
                                 "experiment,seed,stage,metric,value\ne,x,s,m,1\n",
                                 "experiment,seed,stage,metric,value\ne,0,s,m,abc\n",
                                 "experiment,seed,stage,metric,value\ne,0,s,m,nan\n",
                                 "experiment,seed,stage,metric,value\ne,0,s,m,1,2\n"}) {
    write(bad, body);
    CHECK_THROWS_AS(read_report(bad), FormatError);
  }
}

TEST_CASE("seeds, pools and sizes") {
  CHECK(derive_seed(1, "train") == derive_seed(1, "train"));
  CHECK(derive_seed(1, "train") != derive_seed(1, "eval"));
  CHECK(derive_seed(1, "train") != derive_seed(2, "train"));

  ExperimentConfig c;
  const Pool a = make_pool(c, 100, 3);
  const Pool b = make_pool(c, 100, 3);
  CHECK(a.data.size() == 100);
  CHECK(a.data.images.values() == b.data.images.values());
  CHECK(a.clean == b.clean);
  CHECK(std::count(a.clean.begin(), a.clean.end(), true) == 50);
  // Clean and corrupt images are interleaved, not in two blocks.
  CHECK(std::find(a.clean.begin(), a.clean.begin() + 20, false) != a.clean.begin() + 20);
  CHECK(make_pool(c, 100, 4).data.images.values() != a.data.images.values());
  c.pool.corrupt_fraction = 0.0;
  const Pool clean = make_pool(c, 30, 3);
  CHECK(std::count(clean.clean.begin(), clean.clean.end(), true) == 30);

  CHECK(pool_size_for(256, 0.5, 0.5) == 1024 + 16);
  CHECK(pool_size_for(100, 0.9, 0.0) == 1000 + 16);

  ::setenv("GENQ_THREADS", "3", 1);
  CHECK(threads_from_env() == 3);
  ::setenv("GENQ_THREADS", "zero", 1);
  CHECK_THROWS_AS(threads_from_env(), ConfigError);
  ::unsetenv("GENQ_THREADS");
  CHECK(threads_from_env() == 1);
}

TEST_CASE("train and filter commands") {
  ExperimentConfig c = tiny("train");
  const Report first = cmd_train(c);
  CHECK(std::filesystem::exists(c.paths.out + "/model_tiny-cnn_seed5.gqm"));
  const double acc = value(first, "train", "float_accuracy");
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  CHECK(std::isfinite(value(first, "train", "loss_epoch_1")));
  CHECK(cmd_train(c).csv() == first.csv());

  c = tiny("filter_identity");
  c.filter.r1 = 0.0;
  c.filter.r2 = 0.0;
  c.quant.n_keep = 16;
  (void)cmd_filter(c);
  const auto ids = filter::read_manifest(c.paths.out + "/manifest_seed5.txt");
  CHECK(ids.size() == 160);
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(ids[i] == i);

  c = tiny("filter_vit");
  c.arch = nn::Architecture::tiny_vit;
  const Report vit = cmd_filter(c);
  CHECK(slurp(c.paths.out + "/filter_seed5.json").find("\"stage2\": \"patch_entropy\"") != std::string::npos);
  CHECK(value(vit, "filter", "kept") == 40);
  CHECK(value(vit, "filter", "mean_bandwidth") > 0.0);
}

TEST_CASE("ptq and qat commands") {
  ExperimentConfig c = tiny("ptq");
  const Report ptq = cmd_ptq(c);
  CHECK(value(ptq, "ptq", "calib_size") == 16);
  CHECK(std::filesystem::exists(c.paths.out + "/ptq_tiny-cnn_seed5.gqq"));

  c = tiny("qat0");
  c.qat.epochs = 0;
  const Report zero = cmd_qat(c);
  CHECK(value(zero, "qat", "qat_accuracy") == value(zero, "qat", "ptq_accuracy"));
  CHECK(value(zero, "qat", "ptq_accuracy") == value(ptq, "ptq", "ptq_accuracy"));

  c = tiny("qat2");
  const Report two = cmd_qat(c);
  CHECK(std::isfinite(value(two, "qat", "loss_epoch_1")));
  CHECK(std::isfinite(value(two, "qat", "loss_epoch_2")));
  CHECK(two.rows_for("qat").size() == 5);
  CHECK(value(two, "qat", "train_size") == 64);
}

TEST_CASE("ablate command") {
  ExperimentConfig c = tiny("ablate");
  c.seeds = {5, 6};
  const Report rep = cmd_ablate(c);
  for (const std::string stage : {"ablate_energy", "ablate_bn"}) {
    const auto rows = rep.rows_for(stage);
    CHECK(rows.size() == 5 * c.seeds.size());
    for (const auto& r : rows) {
      CHECK(r.value >= 0.0);
      CHECK(r.value <= 1.0);
    }
    CHECK(rep.rows_for(stage + "_audit").size() == 5 * c.seeds.size());
  }
  c.ablate.max_pool = 200;
  CHECK_THROWS_AS(cmd_ablate(c), ConfigError);
}

TEST_CASE("transfer command") {
  ExperimentConfig c = tiny("transfer");
  const Report rep = cmd_transfer(c);
  const auto rows = rep.rows_for("transfer");
  CHECK(rows.size() == 6);
  const double cc = value(rep, "transfer", "filter=tiny-cnn;quant=tiny-cnn");
  const double vc = value(rep, "transfer", "filter=tiny-vit;quant=tiny-cnn");
  const double vv = value(rep, "transfer", "filter=tiny-vit;quant=tiny-vit");
  const double cv = value(rep, "transfer", "filter=tiny-cnn;quant=tiny-vit");
  CHECK(value(rep, "transfer", "drop:filter=tiny-vit;quant=tiny-cnn") == doctest::Approx(cc - vc));
  CHECK(value(rep, "transfer", "drop:filter=tiny-cnn;quant=tiny-vit") == doctest::Approx(vv - cv));

  // Diagonal cells replay the single-model PTQ command.
  ExperimentConfig p = tiny("transfer_replay");
  CHECK(std::abs(value(cmd_ptq(p), "ptq", "ptq_accuracy") - cc) <= 0.001);
  p.arch = nn::Architecture::tiny_vit;
  CHECK(std::abs(value(cmd_ptq(p), "ptq", "ptq_accuracy") - vv) <= 0.001);
}

TEST_CASE("run_command appends rows and enforces the budget") {
  ExperimentConfig c = tiny("run");
  CHECK_THROWS_AS(run_command("nope", c), ConfigError);
  (void)run_command("synth", c);
  (void)run_command("synth", c);
  const auto rows = read_report(c.paths.out + "/report.csv");
  CHECK(rows.size() == 6);
  CHECK(std::filesystem::exists(c.paths.out + "/pool_seed5.gqd"));

  c.budget_seconds = 1e-9;
  CHECK_THROWS_AS(run_command("synth", c), Error);
  CHECK(read_report(c.paths.out + "/report.csv").size() == 9);

  const ExperimentConfig o = apply_overrides(c, Overrides{42, std::string("/tmp/elsewhere")});
  CHECK(o.seeds == std::vector<std::uint64_t>{42});
  CHECK(o.paths.out == "/tmp/elsewhere");
}
