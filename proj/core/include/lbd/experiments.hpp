#pragma once

#include <filesystem>
#include <vector>

#include "lbd/config.hpp"
#include "lbd/data.hpp"
#include "lbd/io.hpp"
#include "lbd/net.hpp"

namespace lbd {

struct ExperimentResult {
  RunRecord record;
  std::vector<std::filesystem::path> outputs;
};

// The 1-2-1 regression toy: one input, two gated ReLU hidden units, one
// output, weights frozen after initialization. Small enough that the exact
// gate gradient enumerates in four forward passes.
struct ToyStudy {
  MlpModel model;
  Matrix x;
  Matrix y;
};
ToyStudy make_toy_study(const RunConfig& cfg);
std::vector<double> toy_grid_keep_rates(const RunConfig& cfg);

// Bias / spread / error of single-sample ARM and Concrete estimates against
// exact enumeration over a keep-rate grid; writes grid.csv.
ExperimentResult run_toy_grid(const RunConfig& cfg);
// Gradient-descent trace on exact gradients with both estimators logged at
// every step; writes trace.csv.
ExperimentResult run_toy_trace(const RunConfig& cfg);
// Two-moons classifier with the configured dropout estimator; writes
// training.csv, pavpu.csv and record.json.
ExperimentResult run_classification(const RunConfig& cfg);
// Synthetic implicit-feedback collaborative filtering with the SIVAE
// objective; writes training.csv and record.json.
ExperimentResult run_cf(const RunConfig& cfg);

ExperimentResult run_experiment(const RunConfig& cfg);

}  // namespace lbd
