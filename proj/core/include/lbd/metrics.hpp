#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace lbd {

// Learning-to-rank scores over a ranked item list with binary relevance.
// Recall@R counts the relevant items in the top R against min(R, #relevant);
// NDCG@R discounts rank r (1-based) by 1/log2(r + 1) and normalizes by the
// ideal ordering.
double recall_at_r(std::span<const std::size_t> ranking,
                   std::span<const std::uint8_t> relevant, std::size_t R);
double ndcg_at_r(std::span<const std::size_t> ranking,
                 std::span<const std::uint8_t> relevant, std::size_t R);

struct RankingMetrics {
  double recall_at_20 = 0.0;
  double recall_at_50 = 0.0;
  double ndcg_at_100 = 0.0;
  std::size_t users = 0;
};

// Ranks items by score (descending, index ascending on ties) after
// excluding the given items from consideration.
std::vector<std::size_t> rank_items(std::span<const double> scores,
                                    std::span<const std::uint8_t> excluded);

}  // namespace lbd
