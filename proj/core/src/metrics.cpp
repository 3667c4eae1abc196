#include "lbd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

#include "lbd/error.hpp"

namespace lbd {

double recall_at_r(std::span<const std::size_t> ranking,
                   std::span<const std::uint8_t> relevant, std::size_t R) {
  std::size_t n_rel = 0;
  for (std::uint8_t r : relevant) n_rel += r ? 1 : 0;
  if (n_rel == 0) throw ConfigError("recall_at_r: no relevant items");
  std::size_t hits = 0;
  const std::size_t top = std::min(R, ranking.size());
  for (std::size_t i = 0; i < top; ++i) {
    if (relevant[ranking[i]]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(std::min(R, n_rel));
}

double ndcg_at_r(std::span<const std::size_t> ranking,
                 std::span<const std::uint8_t> relevant, std::size_t R) {
  std::size_t n_rel = 0;
  for (std::uint8_t r : relevant) n_rel += r ? 1 : 0;
  if (n_rel == 0) throw ConfigError("ndcg_at_r: no relevant items");
  const std::size_t top = std::min(R, ranking.size());
  double dcg = 0.0;
  for (std::size_t i = 0; i < top; ++i) {
    if (relevant[ranking[i]]) {
      dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    }
  }
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(R, n_rel); ++i) {
    idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  }
  return dcg / idcg;
}

std::vector<std::size_t> rank_items(std::span<const double> scores,
                                    std::span<const std::uint8_t> excluded) {
  if (!excluded.empty() && excluded.size() != scores.size()) {
    throw DimensionError("rank_items: exclusion mask size mismatch");
  }
  std::vector<std::size_t> order;
  order.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (excluded.empty() || !excluded[i]) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return order;
}

}  // namespace lbd
