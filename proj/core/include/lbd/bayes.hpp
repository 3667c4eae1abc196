#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lbd/net.hpp"
#include "lbd/rng.hpp"

namespace lbd {

struct BayesConfig {
  double prior_variance = 1.0;  // s^2 of the zero-mean Gaussian prior
  int mc_passes = 10;           // S stochastic forward passes
  double kl_weight = 0.0;       // 0 disables the KL term
};

// KL divergence between the Bernoulli-masked weight posterior and a
// zero-mean Gaussian prior with variance s^2, up to an additive constant:
//   sum_j sum_k  sigmoid(a_jk)/(2 s^2) * ||W_j[k, .]||^2 - H(Ber(sigmoid(a_jk)))
// where k runs over the gated input neurons of layer j. Requires Bernoulli
// gates with per-neuron granularity; the row norm is tied to its neuron's
// keep probability.
struct KlTerm {
  double value = 0.0;
  std::vector<double> dlogits;   // flattened like gate_logits()
  std::vector<Matrix> dweights;  // per layer; empty for ungated layers
};
KlTerm kl_regularizer(const MlpModel& model, double prior_variance);

// Monte Carlo posterior predictive over S stochastic passes with fresh
// masks. Outputs are passed through a softmax unless the final activation
// already is one.
struct PredictiveSummary {
  Matrix mean_probs;                  // batch x classes
  std::vector<double> entropy;        // batch
  std::vector<std::size_t> predicted; // argmax of mean_probs
  std::vector<std::uint8_t> correct;  // filled by score_against_labels
};
PredictiveSummary predictive_posterior(const MlpModel& model, const Matrix& inputs,
                                       int mc_passes, Rng& rng);
void score_against_labels(PredictiveSummary& summary,
                          std::span<const std::size_t> labels);

// PAvPU at relative entropy threshold t: a prediction counts as uncertain
// when its predictive entropy exceeds
//   min_entropy + t * (max_entropy - min_entropy)
// over the evaluated set.
struct PavpuReport {
  std::size_t n_ac = 0, n_ic = 0, n_au = 0, n_iu = 0;
  double threshold_t = 0.0;
  double entropy_threshold = 0.0;
  double pavpu = 0.0;
};
PavpuReport pavpu(const PredictiveSummary& summary,
                  std::span<const std::size_t> labels, double t);

struct PavpuSweep {
  std::vector<PavpuReport> reports;
  double mean_pavpu = 0.0;
};
PavpuSweep pavpu_sweep(const PredictiveSummary& summary,
                       std::span<const std::size_t> labels,
                       std::span<const double> ts);

}  // namespace lbd
