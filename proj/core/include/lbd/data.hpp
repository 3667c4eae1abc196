#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lbd/matrix.hpp"
#include "lbd/rng.hpp"

namespace lbd {

// Regression pairs for the toy study: x ~ Uniform[-1, 1],
// y = true_slope * x + Normal(0, noise_sd^2).
struct ToyDataset {
  Matrix x;  // n x 1
  Matrix y;  // n x 1
};
ToyDataset generate_toy_dataset(std::size_t n, Rng& rng, double true_slope,
                                double noise_sd);

// Two interleaved half-moons, the desk-scale classification stand-in.
struct MoonsDataset {
  Matrix x;                         // n x 2
  std::vector<std::size_t> labels;  // 0 or 1
  Matrix targets;                   // n x 2 one-hot
};
MoonsDataset make_two_moons(std::size_t n, double noise, Rng& rng);

// Binary user-item interactions, stored per user as sorted item ids.
struct InteractionMatrix {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::vector<std::vector<std::uint32_t>> by_user;
};

struct CfSynthesisConfig {
  std::size_t users = 500;
  std::size_t items = 200;
  std::size_t factors = 8;       // 0 = popularity-only structure
  double popularity_weight = 1.0;
  std::size_t min_interactions = 5;
  double mean_extra_interactions = 25.0;
};
// Gumbel-top-k selection over user-item affinities built from latent
// factors plus a per-item popularity offset.
InteractionMatrix synthesize_implicit_feedback(const CfSynthesisConfig& cfg, Rng& rng);

// Lines of "user_id<TAB>item_id"; presence is binarized, ids are remapped
// densely in first-seen order so reruns over the same file are stable.
InteractionMatrix load_interactions(const std::string& path);

}  // namespace lbd
