#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lbd/estimators.hpp"
#include "lbd/net.hpp"
#include "lbd/rng.hpp"

namespace lbd {

enum class Likelihood { multinomial, bernoulli, gaussian };
const char* likelihood_name(Likelihood l);

// Encoder with gated (dropout) layers producing (mean, log-variance) of a
// diagonal Gaussian over the latent code; decoder mapping latents back to
// data logits. Mask realizations mix the Gaussian into an implicit
// posterior; the prior over latents is standard normal.
struct SivaeModel {
  MlpModel encoder;  // data_dim -> 2 * latent_dim, identity output
  MlpModel decoder;  // latent_dim -> data_dim, identity output (logits)
  std::size_t latent_dim = 0;
  Likelihood likelihood = Likelihood::multinomial;
  double beta = 1.0;  // weight on the KL-like part of the objective

  void validate() const;
};

struct GaussianParams {
  Matrix mean;  // batch x latent
  Matrix var;   // batch x latent, strictly positive
};

// One deterministic encoder pass under the given masks. The raw
// log-variance head is clamped to [-10, 10] before exponentiation.
GaussianParams encode(const SivaeModel& model, const Matrix& x, const MaskSet& masks);

double gaussian_log_density(std::span<const double> eta, std::span<const double> mu,
                            std::span<const double> var);

double multinomial_log_likelihood(std::span<const double> logits,
                                  std::span<const double> x);

// Linear annealing ramp: min(beta_max, beta_max * epoch / total).
double beta_schedule(std::size_t epoch, std::size_t total_anneal_epochs,
                     double beta_max);

// Per-batch objective:
//   L_i = -[ log p(x_i | eta) + beta * ( log p(eta)
//            - log( (1/(V+1)) sum_v q(eta | x_i, z^(v)) ) ) ]
// with eta reparameterized from the block-0 masks and V auxiliary mask
// blocks entering the mixture. beta multiplies the KL-like part so the
// saturated-gate case reduces to the usual beta-weighted bound.
struct SivaeEval {
  double loss = 0.0;                    // mean over the batch
  std::vector<double> per_example;
  std::vector<MaskSet> mask_blocks;     // V+1 entries; block 0 feeds eta
  Matrix eps;                           // batch x latent
  Matrix eta;                           // batch x latent
  std::vector<GaussianParams> components;
  // Pathwise gradients of the batch-mean loss, masks and noise fixed.
  NetGradients encoder_grads;
  NetGradients decoder_grads;
  // Pathwise d(mean loss)/d(gate logits); filled for relaxed (concrete or
  // gaussian) encoder gates, empty for bernoulli, where ARM is the route.
  std::vector<double> alpha_grads;
};
SivaeEval sivae_objective(const SivaeModel& model, const Matrix& x, int V, Rng& rng);

// Loss-only evaluation with explicit masks and noise; the replay path used
// by the ARM estimator and by reduction identities in tests.
std::vector<double> sivae_replay_losses(const SivaeModel& model, const Matrix& x,
                                        const std::vector<MaskSet>& mask_blocks,
                                        const Matrix& eps);

// ARM over the encoder's Bernoulli gate logits. The per-example objective
// is a black box of all V+1 mask blocks; every block shares the same
// logits, so block gradients fold back onto the shared coordinates.
GradEstimate sivae_alpha_gradient_arm(const SivaeModel& model, const Matrix& x,
                                      int V, double scale, Rng& rng, int n_samples);

}  // namespace lbd
