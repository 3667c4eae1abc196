#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace lbd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected first/second-moment state for one parameter block.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long t = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state, const AdamConfig& cfg,
               std::string_view name = "params");

}  // namespace lbd
