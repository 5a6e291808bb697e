// SPDX-License-Identifier: Apache-2.0
// genq: command-line front end for the experiment harness.
#include <CLI11.hpp>

#include <cstdio>
#include <exception>

#include "genq/common/error.hpp"
#include "genq/harness/commands.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

}  // namespace

int main(int argc, char** argv) {
  using namespace genq::harness;
  CLI::App app{"genq: filtered synthetic calibration data for low-bit quantization"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  for (const auto& name : command_names()) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON experiment config")->required();
    sub->add_option("--seed", seed, "run a single seed instead of the config's list");
    sub->add_option("--out", out, "output directory (overrides paths.out)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  const CLI::App* sub = app.get_subcommands().front();
  try {
    Overrides ov;
    if (sub->count("--seed") > 0) ov.seed = seed;
    if (sub->count("--out") > 0) ov.out = out;
    const ExperimentConfig config = apply_overrides(load_config(config_path), ov);
    const Report rep = run_command(sub->get_name(), config);
    std::fputs(rep.csv().c_str(), stdout);
    return 0;
  } catch (const genq::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}
