#include "lbd/sivae.hpp"

#include <cmath>

#include "lbd/error.hpp"

namespace lbd {

namespace {

constexpr double kLogVarClamp = 10.0;
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace

const char* likelihood_name(Likelihood l) {
  switch (l) {
    case Likelihood::multinomial: return "multinomial";
    case Likelihood::bernoulli: return "bernoulli";
    case Likelihood::gaussian: return "gaussian";
  }
  return "?";
}

void SivaeModel::validate() const {
  encoder.validate();
  decoder.validate();
  if (latent_dim == 0) throw DimensionError("sivae: latent_dim must be positive");
  if (encoder.output_dim() != 2 * latent_dim) {
    throw DimensionError("sivae: encoder output width must be 2 * latent_dim");
  }
  if (decoder.input_dim() != latent_dim) {
    throw DimensionError("sivae: decoder input width must be latent_dim");
  }
  if (decoder.output_dim() != encoder.input_dim()) {
    throw DimensionError("sivae: decoder output width must match data dim");
  }
  if (encoder.activations.back() != Activation::identity ||
      decoder.activations.back() != Activation::identity) {
    throw ConfigError("sivae: encoder and decoder must end with identity outputs");
  }
  if (beta < 0.0) throw ConfigError("sivae: beta must be nonnegative");
}

namespace {

struct EncodedBlock {
  ForwardResult fwd;   // encoder outputs + cache
  GaussianParams params;
  Matrix clamp_open;   // 1 where the raw log-variance is inside the clamp
};

EncodedBlock encode_block(const SivaeModel& model, const Matrix& x,
                          const MaskSet& masks) {
  EncodedBlock b;
  b.fwd = forward_pass(model.encoder, x, masks);
  const Matrix& out = b.fwd.outputs;
  const std::size_t batch = out.rows();
  const std::size_t latent = model.latent_dim;
  b.params.mean = Matrix(batch, latent);
  b.params.var = Matrix(batch, latent);
  b.clamp_open = Matrix(batch, latent);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t d = 0; d < latent; ++d) {
      b.params.mean(i, d) = out(i, d);
      const double raw = out(i, latent + d);
      const double clamped =
          raw < -kLogVarClamp ? -kLogVarClamp : (raw > kLogVarClamp ? kLogVarClamp : raw);
      b.params.var(i, d) = std::exp(clamped);
      b.clamp_open(i, d) = std::abs(raw) < kLogVarClamp ? 1.0 : 0.0;
    }
  }
  return b;
}

GaussianParams encode_params_only(const SivaeModel& model, const Matrix& x,
                                  const MaskSet& masks) {
  const Matrix out = forward_eval(model.encoder, x, masks);
  const std::size_t batch = out.rows();
  const std::size_t latent = model.latent_dim;
  GaussianParams p{Matrix(batch, latent), Matrix(batch, latent)};
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t d = 0; d < latent; ++d) {
      p.mean(i, d) = out(i, d);
      const double raw = out(i, latent + d);
      const double clamped =
          raw < -kLogVarClamp ? -kLogVarClamp : (raw > kLogVarClamp ? kLogVarClamp : raw);
      p.var(i, d) = std::exp(clamped);
    }
  }
  return p;
}

double log_likelihood_row(Likelihood kind, std::span<const double> logits,
                          std::span<const double> x) {
  switch (kind) {
    case Likelihood::multinomial:
      return multinomial_log_likelihood(logits, x);
    case Likelihood::bernoulli: {
      double acc = 0.0;
      for (std::size_t j = 0; j < logits.size(); ++j) {
        acc += -x[j] * softplus(-logits[j]) - (1.0 - x[j]) * softplus(logits[j]);
      }
      return acc;
    }
    case Likelihood::gaussian: {
      double acc = 0.0;
      for (std::size_t j = 0; j < logits.size(); ++j) {
        const double d = x[j] - logits[j];
        acc += -0.5 * (d * d + kLog2Pi);
      }
      return acc;
    }
  }
  throw ConfigError("sivae: unknown likelihood");
}

// d log p(x | logits) / d logits, written into grad.
void log_likelihood_grad_row(Likelihood kind, std::span<const double> logits,
                             std::span<const double> x, std::span<double> grad) {
  switch (kind) {
    case Likelihood::multinomial: {
      double mx = logits[0];
      for (double v : logits) mx = std::max(mx, v);
      double sum = 0.0;
      for (std::size_t j = 0; j < logits.size(); ++j) {
        grad[j] = std::exp(logits[j] - mx);
        sum += grad[j];
      }
      double total = 0.0;
      for (double v : x) total += v;
      for (std::size_t j = 0; j < logits.size(); ++j) {
        grad[j] = x[j] - total * (grad[j] / sum);
      }
      return;
    }
    case Likelihood::bernoulli:
      for (std::size_t j = 0; j < logits.size(); ++j) {
        grad[j] = x[j] - sigmoid(logits[j]);
      }
      return;
    case Likelihood::gaussian:
      for (std::size_t j = 0; j < logits.size(); ++j) {
        grad[j] = x[j] - logits[j];
      }
      return;
  }
  throw ConfigError("sivae: unknown likelihood");
}

struct MixtureRow {
  double log_qmix = 0.0;
  std::vector<double> weights;  // q_v / sum_u q_u
};

MixtureRow mixture_row(const std::vector<GaussianParams>& comps, const Matrix& eta,
                       std::size_t i) {
  MixtureRow r;
  const std::size_t n = comps.size();
  std::vector<double> logq(n);
  double mx = -1e300;
  for (std::size_t v = 0; v < n; ++v) {
    logq[v] = gaussian_log_density(eta.row(i), comps[v].mean.row(i), comps[v].var.row(i));
    mx = std::max(mx, logq[v]);
  }
  double sum = 0.0;
  r.weights.resize(n);
  for (std::size_t v = 0; v < n; ++v) {
    r.weights[v] = std::exp(logq[v] - mx);
    sum += r.weights[v];
  }
  for (double& w : r.weights) w /= sum;
  r.log_qmix = mx + std::log(sum) - std::log(static_cast<double>(n));
  return r;
}

void sample_mask_block(const MlpModel& encoder, std::size_t batch, Rng& rng,
                       MaskSet& masks, std::vector<Matrix>& dmask) {
  masks.by_layer.assign(encoder.depth(), Matrix());
  dmask.assign(encoder.depth(), Matrix());
  for (std::size_t j = 0; j < encoder.depth(); ++j) {
    const GateSpec& g = encoder.gates[j];
    if (!g.gated()) continue;
    const std::size_t width = encoder.layer_sizes[j];
    switch (g.kind) {
      case GateKind::bernoulli:
        masks.by_layer[j] = sample_bernoulli_masks(g, batch, width, rng);
        break;
      case GateKind::concrete: {
        RelaxedMaskSample s = sample_concrete_masks(g, batch, width, rng);
        masks.by_layer[j] = std::move(s.mask);
        dmask[j] = std::move(s.dmask_dlogit);
        break;
      }
      case GateKind::gaussian: {
        RelaxedMaskSample s = sample_gaussian_masks(g, batch, width, rng);
        masks.by_layer[j] = std::move(s.mask);
        dmask[j] = std::move(s.dmask_dlogit);
        break;
      }
      case GateKind::none:
        break;
    }
  }
}

}  // namespace

GaussianParams encode(const SivaeModel& model, const Matrix& x, const MaskSet& masks) {
  model.validate();
  return encode_params_only(model, x, masks);
}

double gaussian_log_density(std::span<const double> eta, std::span<const double> mu,
                            std::span<const double> var) {
  if (eta.size() != mu.size() || eta.size() != var.size()) {
    throw DimensionError("gaussian_log_density: dimension mismatch");
  }
  double acc = 0.0;
  for (std::size_t d = 0; d < eta.size(); ++d) {
    if (var[d] <= 0.0) throw NumericError("gaussian_log_density: nonpositive variance");
    const double diff = eta[d] - mu[d];
    acc += -0.5 * (kLog2Pi + std::log(var[d]) + diff * diff / var[d]);
  }
  return acc;
}

double multinomial_log_likelihood(std::span<const double> logits,
                                  std::span<const double> x) {
  if (logits.size() != x.size()) {
    throw DimensionError("multinomial_log_likelihood: dimension mismatch");
  }
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  double acc = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (x[j] < 0.0) throw ConfigError("multinomial_log_likelihood: negative count");
    acc += x[j] * (logits[j] - lse);
  }
  return acc;
}

double beta_schedule(std::size_t epoch, std::size_t total_anneal_epochs,
                     double beta_max) {
  if (total_anneal_epochs < 1) {
    throw ConfigError("beta_schedule: total_anneal_epochs must be >= 1");
  }
  const double ramp = beta_max * static_cast<double>(epoch) /
                      static_cast<double>(total_anneal_epochs);
  return std::min(beta_max, ramp);
}

std::vector<double> sivae_replay_losses(const SivaeModel& model, const Matrix& x,
                                        const std::vector<MaskSet>& mask_blocks,
                                        const Matrix& eps) {
  model.validate();
  if (mask_blocks.empty()) throw ConfigError("sivae: need at least the source mask block");
  const std::size_t batch = x.rows();
  if (eps.rows() != batch || eps.cols() != model.latent_dim) {
    throw DimensionError("sivae: eps shape mismatch");
  }
  std::vector<GaussianParams> comps;
  comps.reserve(mask_blocks.size());
  for (const MaskSet& m : mask_blocks) {
    comps.push_back(encode_params_only(model, x, m));
  }
  Matrix eta(batch, model.latent_dim);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t d = 0; d < model.latent_dim; ++d) {
      eta(i, d) = comps[0].mean(i, d) + std::sqrt(comps[0].var(i, d)) * eps(i, d);
    }
  }
  const Matrix dec = forward_eval(model.decoder, eta, MaskSet{});

  std::vector<double> losses(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const double lpx = log_likelihood_row(model.likelihood, dec.row(i), x.row(i));
    double lp_eta = 0.0;
    for (std::size_t d = 0; d < model.latent_dim; ++d) {
      lp_eta += -0.5 * (eta(i, d) * eta(i, d) + kLog2Pi);
    }
    const MixtureRow mix = mixture_row(comps, eta, i);
    losses[i] = -(lpx + model.beta * (lp_eta - mix.log_qmix));
  }
  return losses;
}

SivaeEval sivae_objective(const SivaeModel& model, const Matrix& x, int V, Rng& rng) {
  model.validate();
  if (V < 0) throw ConfigError("sivae_objective: V must be >= 0");
  const std::size_t batch = x.rows();
  const std::size_t latent = model.latent_dim;
  const std::size_t n_blocks = static_cast<std::size_t>(V) + 1;

  SivaeEval ev;
  ev.mask_blocks.resize(n_blocks);
  std::vector<std::vector<Matrix>> dmask(n_blocks);
  // Draw order is part of the seeded contract: source masks, then the
  // reparameterization noise, then the auxiliary mask blocks.
  sample_mask_block(model.encoder, batch, rng, ev.mask_blocks[0], dmask[0]);
  ev.eps = Matrix(batch, latent);
  for (double& e : ev.eps.flat()) e = rng.normal();
  for (std::size_t v = 1; v < n_blocks; ++v) {
    sample_mask_block(model.encoder, batch, rng, ev.mask_blocks[v], dmask[v]);
  }

  std::vector<EncodedBlock> blocks;
  blocks.reserve(n_blocks);
  for (std::size_t v = 0; v < n_blocks; ++v) {
    blocks.push_back(encode_block(model, x, ev.mask_blocks[v]));
  }
  ev.components.resize(n_blocks);
  for (std::size_t v = 0; v < n_blocks; ++v) ev.components[v] = blocks[v].params;

  ev.eta = Matrix(batch, latent);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t d = 0; d < latent; ++d) {
      ev.eta(i, d) = blocks[0].params.mean(i, d) +
                     std::sqrt(blocks[0].params.var(i, d)) * ev.eps(i, d);
    }
  }

  ForwardResult dec = forward_pass(model.decoder, ev.eta, MaskSet{});
  const double inv_b = 1.0 / static_cast<double>(batch);
  const double beta = model.beta;

  // Seeds for the decoder backward pass and the eta chain.
  Matrix dec_seed(batch, model.decoder.output_dim());
  std::vector<MixtureRow> mix(batch);
  ev.per_example.resize(batch);
  std::vector<double> ll_grad(model.decoder.output_dim());
  for (std::size_t i = 0; i < batch; ++i) {
    const double lpx = log_likelihood_row(model.likelihood, dec.outputs.row(i), x.row(i));
    double lp_eta = 0.0;
    for (std::size_t d = 0; d < latent; ++d) {
      lp_eta += -0.5 * (ev.eta(i, d) * ev.eta(i, d) + kLog2Pi);
    }
    mix[i] = mixture_row(ev.components, ev.eta, i);
    ev.per_example[i] = -(lpx + beta * (lp_eta - mix[i].log_qmix));

    log_likelihood_grad_row(model.likelihood, dec.outputs.row(i), x.row(i), ll_grad);
    for (std::size_t j = 0; j < ll_grad.size(); ++j) {
      dec_seed(i, j) = -inv_b * ll_grad[j];
    }
  }
  double total = 0.0;
  for (double l : ev.per_example) total += l;
  ev.loss = total * inv_b;

  BackwardOptions dec_opts;
  dec_opts.want_input_grad = true;
  BackwardResult dec_back =
      backward_from_output_grad(model.decoder, dec.cache, dec_seed, dec_opts);
  ev.decoder_grads = std::move(dec_back.grads);

  // d(mean loss)/d eta: decoder chain plus the prior and mixture terms.
  Matrix deta = std::move(dec_back.input_grad);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t d = 0; d < latent; ++d) {
      double mix_term = 0.0;
      for (std::size_t v = 0; v < n_blocks; ++v) {
        mix_term += mix[i].weights[v] *
                    (ev.eta(i, d) - ev.components[v].mean(i, d)) /
                    ev.components[v].var(i, d);
      }
      deta(i, d) += inv_b * beta * (ev.eta(i, d) - mix_term);
    }
  }

  const GateLayout layout = gate_layout(model.encoder);
  const bool relaxed = [&] {
    for (const auto& b : layout.blocks) {
      if (model.encoder.gates[b.layer].kind != GateKind::bernoulli) return true;
    }
    return false;
  }();
  if (relaxed) ev.alpha_grads.assign(layout.total, 0.0);

  ev.encoder_grads = zero_gradients(model.encoder);
  BackwardOptions enc_opts;
  enc_opts.want_mask_grads = relaxed;
  Matrix enc_seed(batch, model.encoder.output_dim());
  for (std::size_t v = 0; v < n_blocks; ++v) {
    enc_seed.fill(0.0);
    for (std::size_t i = 0; i < batch; ++i) {
      const double w = mix[i].weights[v];
      for (std::size_t d = 0; d < latent; ++d) {
        const double var = ev.components[v].var(i, d);
        const double diff = ev.eta(i, d) - ev.components[v].mean(i, d);
        // + beta * log qmix contributes through (mu_v, var_v).
        double dmu = inv_b * beta * w * diff / var;
        double dlogvar = inv_b * beta * w * 0.5 * (diff * diff / var - 1.0);
        if (v == 0) {
          // eta = mu_0 + sqrt(var_0) * eps.
          const double de = deta(i, d);
          dmu += de;
          dlogvar += de * ev.eps(i, d) * std::sqrt(var) * 0.5;
        }
        enc_seed(i, d) = dmu;
        enc_seed(i, latent + d) = dlogvar * blocks[v].clamp_open(i, d);
      }
    }
    BackwardResult enc_back =
        backward_from_output_grad(model.encoder, blocks[v].fwd.cache, enc_seed, enc_opts);
    accumulate(ev.encoder_grads, enc_back.grads);
    if (relaxed) {
      for (const auto& b : layout.blocks) {
        const Matrix& mg = enc_back.mask_grads[b.layer];
        const Matrix& dm = dmask[v][b.layer];
        if (dm.empty()) continue;  // bernoulli layer in a mixed model
        for (std::size_t i = 0; i < batch; ++i) {
          for (std::size_t c = 0; c < b.width; ++c) {
            const std::size_t k = b.count == 1 ? b.offset : b.offset + c;
            ev.alpha_grads[k] += mg(i, c) * dm(i, c);
          }
        }
      }
    }
  }
  return ev;
}

GradEstimate sivae_alpha_gradient_arm(const SivaeModel& model, const Matrix& x,
                                      int V, double scale, Rng& rng, int n_samples) {
  model.validate();
  if (V < 0) throw ConfigError("sivae_alpha_gradient_arm: V must be >= 0");
  if (n_samples < 1) {
    throw ConfigError("sivae_alpha_gradient_arm: n_samples must be >= 1");
  }
  const GateLayout layout = gate_layout(model.encoder);
  if (layout.total == 0) throw ConfigError("sivae_alpha_gradient_arm: encoder has no gates");
  for (const auto& b : layout.blocks) {
    if (model.encoder.gates[b.layer].kind != GateKind::bernoulli) {
      throw UnsupportedError("sivae_alpha_gradient_arm: gates must be bernoulli");
    }
  }
  const std::vector<double> logits = gate_logits(model.encoder);
  const std::size_t coords = layout.total;
  const std::size_t n_blocks = static_cast<std::size_t>(V) + 1;
  const std::size_t dim = n_blocks * coords;
  std::vector<double> p_lo(coords), p_hi(coords);
  for (std::size_t k = 0; k < coords; ++k) {
    p_lo[k] = sigmoid(-logits[k]);
    p_hi[k] = sigmoid(logits[k]);
  }
  const std::size_t batch = x.rows();

  auto blocks_from_bits = [&](const Matrix& bits) {
    std::vector<MaskSet> blocks(n_blocks);
    for (std::size_t v = 0; v < n_blocks; ++v) {
      MaskSet& ms = blocks[v];
      ms.by_layer.resize(model.encoder.depth());
      for (const auto& b : layout.blocks) {
        Matrix m(batch, b.width);
        for (std::size_t i = 0; i < batch; ++i) {
          for (std::size_t c = 0; c < b.width; ++c) {
            const std::size_t k = b.count == 1 ? b.offset : b.offset + c;
            m(i, c) = bits(i, v * coords + k);
          }
        }
        ms.by_layer[b.layer] = std::move(m);
      }
    }
    return blocks;
  };

  Matrix u(batch, dim), pseudo(batch, dim), truth(batch, dim);
  Matrix eps(batch, model.latent_dim);
  std::vector<double> accum(coords, 0.0);
  for (int n = 0; n < n_samples; ++n) {
    for (double& e : eps.flat()) e = rng.normal();
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t d = 0; d < dim; ++d) {
        const std::size_t k = d % coords;
        const double ud = rng.uniform();
        u(i, d) = ud;
        pseudo(i, d) = ud > p_lo[k] ? 1.0 : 0.0;
        truth(i, d) = ud < p_hi[k] ? 1.0 : 0.0;
      }
    }
    const std::vector<double> lp =
        sivae_replay_losses(model, x, blocks_from_bits(pseudo), eps);
    const std::vector<double> lt =
        sivae_replay_losses(model, x, blocks_from_bits(truth), eps);
    for (std::size_t i = 0; i < batch; ++i) {
      const double diff = lp[i] - lt[i];
      if (diff == 0.0) continue;
      for (std::size_t d = 0; d < dim; ++d) {
        accum[d % coords] += diff * (u(i, d) - 0.5);
      }
    }
  }
  for (double& g : accum) g *= scale / static_cast<double>(n_samples);
  for (double g : accum) {
    if (!std::isfinite(g)) throw NumericError("sivae_alpha_gradient_arm: non-finite gradient");
  }
  GradEstimate e;
  e.grads = std::move(accum);
  e.estimator = EstimatorKind::arm;
  e.n_samples = n_samples;
  e.seed = rng.seed();
  return e;
}

}  // namespace lbd
