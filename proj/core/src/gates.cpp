#include "lbd/gates.hpp"

#include <algorithm>
#include <cmath>

#include "lbd/error.hpp"

namespace lbd {

void clamp_logits(GateSpec& spec) {
  for (double& a : spec.logits) a = std::clamp(a, -kLogitClamp, kLogitClamp);
}

std::vector<double> keep_probability(const GateSpec& spec) {
  if (!spec.gated()) throw ConfigError("keep_probability: gate kind is none");
  std::vector<double> p(spec.logits.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(spec.logits[i]);
  return p;
}

std::size_t gate_logit_dim(const GateSpec& spec) {
  return spec.granularity == GateGranularity::per_layer ? 1 : spec.logits.size();
}

namespace {

void check_gate_width(const GateSpec& spec, std::size_t width, const char* op) {
  const bool ok = spec.granularity == GateGranularity::per_layer
                      ? spec.logits.size() == 1
                      : spec.logits.size() == width;
  if (!ok) {
    throw DimensionError(std::string(op) + ": logit dimension does not match gated width");
  }
}

}  // namespace

Matrix sample_bernoulli_masks(const GateSpec& spec, std::size_t batch,
                              std::size_t width, Rng& rng) {
  if (spec.kind != GateKind::bernoulli) {
    throw ConfigError("sample_bernoulli_masks: gate is not bernoulli");
  }
  check_gate_width(spec, width, "sample_bernoulli_masks");
  Matrix mask(batch, width);
  if (spec.granularity == GateGranularity::per_layer) {
    const double p = sigmoid(spec.logits[0]);
    for (std::size_t i = 0; i < batch; ++i) {
      const double bit = rng.bernoulli(p) ? 1.0 : 0.0;
      for (std::size_t j = 0; j < width; ++j) mask(i, j) = bit;
    }
  } else {
    std::vector<double> p = keep_probability(spec);
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        mask(i, j) = rng.bernoulli(p[j]) ? 1.0 : 0.0;
      }
    }
  }
  return mask;
}

ArmMaskPair arm_mask_pair(const GateSpec& spec, std::span<const double> u) {
  if (spec.kind != GateKind::bernoulli) {
    throw ConfigError("arm_mask_pair: gate is not bernoulli");
  }
  if (u.size() != spec.logits.size()) {
    throw DimensionError("arm_mask_pair: uniform draw dimension does not match logits");
  }
  ArmMaskPair pair;
  pair.pseudo.resize(u.size());
  pair.truth.resize(u.size());
  for (std::size_t k = 0; k < u.size(); ++k) {
    const double a = spec.logits[k];
    pair.pseudo[k] = u[k] > sigmoid(-a) ? 1.0 : 0.0;
    pair.truth[k] = u[k] < sigmoid(a) ? 1.0 : 0.0;
  }
  return pair;
}

double concrete_mask_from_uniform(double logit, double temperature, double u) {
  return sigmoid((logit + std::log(u / (1.0 - u))) / temperature);
}

double gaussian_mask_from_normal(double logit, double variance_cap, double eps) {
  return 1.0 + std::sqrt(variance_cap * sigmoid(logit)) * eps;
}

RelaxedMaskSample sample_concrete_masks(const GateSpec& spec, std::size_t batch,
                                        std::size_t width, Rng& rng) {
  if (spec.kind != GateKind::concrete) {
    throw ConfigError("sample_concrete_masks: gate is not concrete");
  }
  if (spec.concrete_temperature <= 0.0) {
    throw ConfigError("sample_concrete_masks: temperature must be positive");
  }
  check_gate_width(spec, width, "sample_concrete_masks");
  const double tau = spec.concrete_temperature;
  const bool shared = spec.granularity == GateGranularity::per_layer;
  RelaxedMaskSample out{Matrix(batch, width), Matrix(batch, width)};
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      if (shared && j > 0) {
        out.mask(i, j) = out.mask(i, 0);
        out.dmask_dlogit(i, j) = out.dmask_dlogit(i, 0);
        continue;
      }
      // u = 0 or 1 would put the logistic noise at +-inf; redraw.
      double u = rng.uniform();
      while (u <= 0.0 || u >= 1.0) u = rng.uniform();
      const double a = spec.logits[shared ? 0 : j];
      const double m = concrete_mask_from_uniform(a, tau, u);
      out.mask(i, j) = m;
      out.dmask_dlogit(i, j) = m * (1.0 - m) / tau;
    }
  }
  return out;
}

RelaxedMaskSample sample_gaussian_masks(const GateSpec& spec, std::size_t batch,
                                        std::size_t width, Rng& rng) {
  if (spec.kind != GateKind::gaussian) {
    throw ConfigError("sample_gaussian_masks: gate is not gaussian");
  }
  if (spec.gaussian_variance_cap <= 0.0 || spec.gaussian_variance_cap > 1.0) {
    throw ConfigError("sample_gaussian_masks: variance cap must lie in (0, 1]");
  }
  check_gate_width(spec, width, "sample_gaussian_masks");
  const double cap = spec.gaussian_variance_cap;
  const bool shared = spec.granularity == GateGranularity::per_layer;
  RelaxedMaskSample out{Matrix(batch, width), Matrix(batch, width)};
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      if (shared && j > 0) {
        out.mask(i, j) = out.mask(i, 0);
        out.dmask_dlogit(i, j) = out.dmask_dlogit(i, 0);
        continue;
      }
      const double a = spec.logits[shared ? 0 : j];
      const double eps = rng.normal();
      const double v = cap * sigmoid(a);
      out.mask(i, j) = 1.0 + std::sqrt(v) * eps;
      // d mask / d logit = eps * cap * sigma'(a) / (2 sqrt(v))
      out.dmask_dlogit(i, j) = eps * cap * sigmoid_grad(a) / (2.0 * std::sqrt(v));
    }
  }
  return out;
}

}  // namespace lbd
