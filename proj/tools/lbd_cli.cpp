// Experiment runner for learnable Bernoulli dropout.
//
// Subcommands mirror the experiments: toy-grid, toy-trace, classify, cf.
// Settings come from a flat key=value config file plus --set overrides;
// dedicated flags win over both. Exit codes: 0 success, 2 config error,
// 3 numeric failure.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lbd/config.hpp"
#include "lbd/error.hpp"
#include "lbd/experiments.hpp"

namespace {

struct CliArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::string estimator;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int samples = 0;
  bool samples_set = false;
};

lbd::RunConfig assemble(lbd::Experiment experiment, const CliArgs& args) {
  lbd::RunConfig cfg = lbd::default_config(experiment);
  if (!args.config_path.empty()) lbd::apply_config_file(cfg, args.config_path);
  for (const std::string& kv : args.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw lbd::ConfigError("--set expects key=value, got '" + kv + "'");
    }
    lbd::apply_key_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.experiment = experiment;  // the subcommand is authoritative
  if (args.seed_set) cfg.seed = args.seed;
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (!args.estimator.empty()) {
    lbd::apply_key_value(cfg, "estimator", args.estimator);
  }
  if (args.samples_set) cfg.samples = args.samples;
  lbd::validate(cfg);
  return cfg;
}

void print_summary(const lbd::ExperimentResult& result) {
  std::printf("experiment=%s seed=%s wall=%.2fs\n",
              result.record.config.at("experiment").c_str(),
              result.record.config.at("seed").c_str(), result.record.wall_seconds);
  for (const auto& [key, value] : result.record.metrics) {
    std::printf("  %s = %.6g\n", key.c_str(), value);
  }
  for (const auto& path : result.outputs) {
    std::printf("wrote %s\n", path.string().c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learnable Bernoulli dropout experiments"};
  app.require_subcommand(1);

  CliArgs args;
  app.add_option("--config", args.config_path, "flat key=value config file")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", args.seed, "master RNG seed")
      ->each([&](const std::string&) { args.seed_set = true; });
  app.add_option("--out", args.out_dir, "output directory");
  app.add_option("--estimator", args.estimator,
                 "arm | concrete | gaussian | reinforce | regular | mc-dropout");
  app.add_option("--samples", args.samples, "MC samples per gradient estimate")
      ->each([&](const std::string&) { args.samples_set = true; });
  app.add_option("--set", args.sets, "key=value override (repeatable)");

  auto* toy_grid = app.add_subcommand("toy-grid", "bias/STD/MSE over a keep-rate grid");
  auto* toy_trace = app.add_subcommand("toy-trace", "gradient trace along exact descent");
  auto* classify = app.add_subcommand("classify", "two-moons classification experiment");
  auto* cf = app.add_subcommand("cf", "implicit-feedback collaborative filtering");

  CLI11_PARSE(app, argc, argv);

  lbd::Experiment experiment = lbd::Experiment::toy_grid;
  if (toy_grid->parsed()) experiment = lbd::Experiment::toy_grid;
  if (toy_trace->parsed()) experiment = lbd::Experiment::toy_trace;
  if (classify->parsed()) experiment = lbd::Experiment::classify;
  if (cf->parsed()) experiment = lbd::Experiment::cf;

  try {
    const lbd::RunConfig cfg = assemble(experiment, args);
    const lbd::ExperimentResult result = lbd::run_experiment(cfg);
    print_summary(result);
    return 0;
  } catch (const lbd::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const lbd::UnsupportedError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const lbd::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
