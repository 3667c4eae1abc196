#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "lbd/gates.hpp"

namespace lbd {

enum class Experiment { toy_grid, toy_trace, classify, cf };
enum class EstimatorChoice { arm, concrete, gaussian, reinforce, regular, mc_dropout };

const char* experiment_name(Experiment e);
const char* estimator_choice_name(EstimatorChoice e);
Experiment parse_experiment(const std::string& s);

// Every experiment setting lives here. Keys are flat "section.name" pairs
// parsed from config files and --set overrides; unknown keys are rejected
// up front and nothing runs until the whole config validates.
struct RunConfig {
  Experiment experiment = Experiment::toy_grid;
  std::uint64_t seed = 1;
  EstimatorChoice estimator = EstimatorChoice::arm;
  int samples = 1;  // MC samples per gradient estimate during training
  std::string out_dir = "out";
  int threads = 0;  // 0 = hardware concurrency

  struct {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int epochs = 500;
    int batch = 0;  // 0 = full batch
  } opt;

  struct {
    double init_logit = 0.0;
    GateGranularity granularity = GateGranularity::per_neuron;
    double temperature = 0.1;
    double variance_cap = 1.0;
    double regular_rate = 0.5;  // fixed dropout rate for the baselines
    bool none = false;          // disable gates entirely (plain model)
  } gate;

  struct {
    double prior_variance = 1.0;
    double kl_weight = 0.0;  // 0 disables the KL term; -1 = 1/N
    int mc_passes = 10;
  } bayes;

  struct {
    int n = 3000;
    double noise_sd = 0.1;
    double slope = 1.0;
    double grid_min = 0.05;
    double grid_max = 0.95;
    double grid_step = 0.05;
    int grid_samples = 200;
    int trace_steps = 300;
    int trace_samples = 50;
    double trace_lr = 0.5;
    double trace_init_keep = 0.5;
  } toy;

  struct {
    int n = 256;       // training points
    int test_n = 200;
    double noise = 0.1;
    int hidden = 32;
  } moons;

  struct {
    int users = 500;
    int items = 200;
    int factors = 8;
    double popularity = 1.0;
    int min_interactions = 5;
    double mean_interactions = 25.0;
    std::string interactions_path;  // overrides synthesis when set
    int hidden = 64;
    int latent = 16;
    int V = 10;
    double beta_max = 1.0;
    int anneal_epochs = 50;
    double holdout_users = 0.2;
    double fold_in = 0.8;
  } cf;

  // Flat echo of the effective configuration (stable key order).
  std::map<std::string, std::string> key_values() const;
};

RunConfig default_config(Experiment e);
// Applies "key=value"; throws ConfigError on unknown keys or bad values.
void apply_key_value(RunConfig& cfg, const std::string& key, const std::string& value);
// Flat key=value file; '#' starts a comment, blank lines are skipped.
void apply_config_file(RunConfig& cfg, const std::string& path);
void validate(const RunConfig& cfg);

}  // namespace lbd
