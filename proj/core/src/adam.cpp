#include "lbd/adam.hpp"

#include <cmath>
#include <cstdio>
#include <string>

#include "lbd/error.hpp"

namespace lbd {

void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state, const AdamConfig& cfg, std::string_view name) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != state.v.size()) {
    throw DimensionError("adam_step: state shape does not match parameters");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "adam_step: non-finite gradient for %.*s[%zu]",
                    static_cast<int>(name.size()), name.data(), i);
      throw NumericError(buf);
    }
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

}  // namespace lbd
