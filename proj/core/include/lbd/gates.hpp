#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "lbd/matrix.hpp"
#include "lbd/rng.hpp"

namespace lbd {

enum class GateKind { none, bernoulli, concrete, gaussian };
enum class GateGranularity { per_neuron, per_layer };

// Learnable multiplicative-noise distribution for one layer's input.
// The keep probability is sigmoid(logit); the dropout rate is 1 - sigmoid(logit).
struct GateSpec {
  GateKind kind = GateKind::none;
  GateGranularity granularity = GateGranularity::per_neuron;
  std::vector<double> logits;  // gated width, or a single shared entry
  double concrete_temperature = 0.1;
  double gaussian_variance_cap = 1.0;

  bool gated() const { return kind != GateKind::none; }
};

// Logits are clamped after every update so keep probabilities stay strictly
// inside (0, 1) and saturated gates cannot freeze training.
inline constexpr double kLogitClamp = 8.0;

inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// sigma'(x) = sigma(x) * (1 - sigma(x))
inline double sigmoid_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 - s);
}

void clamp_logits(GateSpec& spec);
std::vector<double> keep_probability(const GateSpec& spec);

// Expands a per-layer (shared) gate value to the full gated width.
std::size_t gate_logit_dim(const GateSpec& spec);

// Independent Bernoulli(keep) draws, one mask row per example. Per-layer
// granularity draws once per example and broadcasts across the width.
Matrix sample_bernoulli_masks(const GateSpec& spec, std::size_t batch,
                              std::size_t width, Rng& rng);

// Antithetic mask pair sharing one uniform draw u (same length as logits):
//   pseudo = 1[u > sigmoid(-logit)],  truth = 1[u < sigmoid(logit)].
// The pair disagrees exactly when u lands outside
// (min(p, 1-p), max(p, 1-p)) for p = sigmoid(logit).
struct ArmMaskPair {
  std::vector<double> pseudo;
  std::vector<double> truth;
};
ArmMaskPair arm_mask_pair(const GateSpec& spec, std::span<const double> u);

// Concrete relaxation mask for a single uniform draw:
//   mask = sigmoid((logit + log(u / (1-u))) / temperature).
double concrete_mask_from_uniform(double logit, double temperature, double u);

// Gaussian mask with mean 1 and learnable variance cap * sigmoid(logit):
//   mask = 1 + sqrt(v) * eps.
double gaussian_mask_from_normal(double logit, double variance_cap, double eps);

// Relaxed masks carry their pathwise derivative d mask / d logit so callers
// can chain gradients through the sample.
struct RelaxedMaskSample {
  Matrix mask;          // batch x width
  Matrix dmask_dlogit;  // batch x width
};
RelaxedMaskSample sample_concrete_masks(const GateSpec& spec, std::size_t batch,
                                        std::size_t width, Rng& rng);
RelaxedMaskSample sample_gaussian_masks(const GateSpec& spec, std::size_t batch,
                                        std::size_t width, Rng& rng);

}  // namespace lbd
