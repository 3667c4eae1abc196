#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "lbd/net.hpp"
#include "lbd/rng.hpp"

namespace lbd {

enum class EstimatorKind { arm, reinforce, concrete_pathwise, gaussian_pathwise, exact };
const char* estimator_name(EstimatorKind k);

// Flattened coordinate layout over the gate logits of a model, in layer
// order. Per-layer (shared) gates contribute a single coordinate.
struct GateLayout {
  struct Block {
    std::size_t layer;
    std::size_t offset;  // first coordinate in the flat vector
    std::size_t count;   // number of logits
    std::size_t width;   // gated input width (mask length)
  };
  std::vector<Block> blocks;
  std::size_t total = 0;
};

GateLayout gate_layout(const MlpModel& model);
std::vector<double> gate_logits(const MlpModel& model);
// Writes back flattened logits, clamping each to [-kLogitClamp, kLogitClamp].
void set_gate_logits(MlpModel& model, std::span<const double> logits);

// A gradient over all gate logits plus estimator metadata. All estimators
// in this module target d/d(logits) of  scale * sum_i E_z[ loss_i(z_i) ]
// where loss_i is the per-example loss; pass scale = N/M for the
// dataset-extrapolated objective or 1/M for the batch mean. An unscaled
// loss (scale = 1) yields an estimate of the unscaled objective.
struct GradEstimate {
  std::vector<double> grads;
  EstimatorKind estimator = EstimatorKind::exact;
  int n_samples = 0;
  std::uint64_t seed = 0;
};

// Unbiased antithetic estimator for Bernoulli gates: per example draw
//   u ~ Unif[0,1]^K, evaluate the loss under 1[u > sigmoid(-a)] and
//   1[u < sigmoid(a)], and weight the difference by (u - 1/2).
// Examples whose two masks coincide contribute exactly zero and are
// skipped without evaluation.
GradEstimate arm_gradient(const MlpModel& model, const Matrix& inputs,
                          const Matrix& targets, LossKind kind, double scale,
                          Rng& rng, int n_samples);
// Single ARM sample with caller-supplied uniforms (batch x K); the test
// seam for per-sample identities.
GradEstimate arm_gradient_with_uniforms(const MlpModel& model, const Matrix& inputs,
                                        const Matrix& targets, LossKind kind,
                                        double scale, const Matrix& u);

// Score-function estimator: loss(z) * (z - sigmoid(a)) per coordinate.
GradEstimate reinforce_gradient(const MlpModel& model, const Matrix& inputs,
                                const Matrix& targets, LossKind kind, double scale,
                                Rng& rng, int n_samples);

// Pathwise gradient through the Concrete relaxation; requires every gate
// to be concrete. Biased with respect to the Bernoulli objective.
GradEstimate concrete_gradient(const MlpModel& model, const Matrix& inputs,
                               const Matrix& targets, LossKind kind, double scale,
                               Rng& rng, int n_samples);

// Pathwise gradient through the Gaussian mask reparameterization.
GradEstimate gaussian_gradient(const MlpModel& model, const Matrix& inputs,
                               const Matrix& targets, LossKind kind, double scale,
                               Rng& rng, int n_samples);

// Ground-truth oracle: enumerates all 2^K Bernoulli mask configurations.
// Refuses K > kEnumerationCap to guard against exponential blowup.
inline constexpr std::size_t kEnumerationCap = 20;
GradEstimate exact_gate_gradient(const MlpModel& model, const Matrix& inputs,
                                 const Matrix& targets, LossKind kind, double scale);

// Generic ARM over a black-box per-example loss of the mask bits. `logits`
// defines the Bernoulli coordinates (they may repeat a shared parameter;
// the caller folds duplicated blocks back together).
using MaskLossFn =
    std::function<double(std::size_t example, std::span<const double> bits)>;
GradEstimate arm_gradient_fn(std::span<const double> logits, std::size_t batch,
                             const MaskLossFn& loss, double scale, Rng& rng,
                             int n_samples);

// Coordinate-wise bias / spread / error of a set of estimates against a
// supplied exact gradient. stddev is the unbiased sample standard
// deviation; mse is the mean squared deviation from exact, so
// mse = bias^2 + (1 - 1/n) * stddev^2 up to rounding.
struct EstimatorDiagnostics {
  std::vector<double> bias;
  std::vector<double> stddev;
  std::vector<double> mse;
  std::size_t n = 0;

  double population_variance(std::size_t k) const {
    return (1.0 - 1.0 / static_cast<double>(n)) * stddev[k] * stddev[k];
  }
};

EstimatorDiagnostics estimator_diagnostics(std::span<const GradEstimate> samples,
                                           const GradEstimate& exact);

}  // namespace lbd
