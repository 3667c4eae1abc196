#include <cmath>

#include <doctest.h>

#include "lbd/error.hpp"
#include "lbd/metrics.hpp"

using namespace lbd;

namespace {

std::vector<std::uint8_t> relevant_at(std::initializer_list<std::size_t> hits,
                                      std::size_t n) {
  std::vector<std::uint8_t> r(n, 0);
  for (std::size_t h : hits) r[h] = 1;
  return r;
}

}  // namespace

TEST_CASE("recall@R") {
  const std::vector<std::size_t> ranking = {3, 1, 4, 0, 2};
  SUBCASE("all relevant items inside the top R") {
    const auto rel = relevant_at({3, 1}, 5);
    CHECK(recall_at_r(ranking, rel, 2) == 1.0);
    CHECK(recall_at_r(ranking, rel, 5) == 1.0);
  }
  SUBCASE("half of the relevant set retrieved") {
    const auto rel = relevant_at({3, 2}, 5);
    CHECK(recall_at_r(ranking, rel, 2) == 0.5);
  }
  SUBCASE("denominator is min(R, #relevant)") {
    const auto rel = relevant_at({3, 1, 4}, 5);
    CHECK(recall_at_r(ranking, rel, 2) == 1.0);  // 2 hits / min(2, 3)
  }
  SUBCASE("no relevant items is an error") {
    CHECK_THROWS_AS(recall_at_r(ranking, relevant_at({}, 5), 2), ConfigError);
  }
}

TEST_CASE("ndcg@R") {
  SUBCASE("single relevant item at rank 1") {
    const std::vector<std::size_t> ranking = {2, 0, 1};
    CHECK(ndcg_at_r(ranking, relevant_at({2}, 3), 3) == 1.0);
  }
  SUBCASE("single relevant item at rank 2: ln 2 / ln 3") {
    const std::vector<std::size_t> ranking = {0, 2, 1};
    // DCG = 1/log2(3), IDCG = 1: hand evaluation gives ln2/ln3.
    CHECK(ndcg_at_r(ranking, relevant_at({2}, 3), 3) ==
          doctest::Approx(std::log(2.0) / std::log(3.0)).epsilon(1e-12));
  }
  SUBCASE("perfect prefix ordering gives 1") {
    const std::vector<std::size_t> ranking = {0, 1, 2, 3, 4};
    CHECK(ndcg_at_r(ranking, relevant_at({0, 1, 2}, 5), 5) == doctest::Approx(1.0));
  }
  SUBCASE("values live in [0, 1]") {
    const std::vector<std::size_t> ranking = {4, 3, 2, 1, 0};
    const auto rel = relevant_at({0, 4}, 5);
    const double v = ndcg_at_r(ranking, rel, 3);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("rank_items sorts by score with exclusions and stable ties") {
  const std::vector<double> scores = {0.5, 2.0, 2.0, -1.0, 3.0};
  const std::vector<std::uint8_t> excluded = {0, 0, 0, 0, 1};
  const std::vector<std::size_t> order = rank_items(scores, excluded);
  CHECK(order == std::vector<std::size_t>{1, 2, 0, 3});
}
