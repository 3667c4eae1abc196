#include <cmath>

#include <doctest.h>

#include "lbd/error.hpp"
#include "lbd/gates.hpp"
#include "testutil.hpp"

using namespace lbd;

namespace {

GateSpec bernoulli_gate(std::vector<double> logits,
                        GateGranularity g = GateGranularity::per_neuron) {
  GateSpec spec;
  spec.kind = GateKind::bernoulli;
  spec.granularity = g;
  spec.logits = std::move(logits);
  return spec;
}

}  // namespace

TEST_CASE("keep probability is the logit sigmoid") {
  GateSpec spec = bernoulli_gate({0.0, 8.0, -8.0});
  const auto p = keep_probability(spec);
  CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-12));
  // sigma(8) and sigma(-8), the clamp boundaries.
  CHECK(p[1] == doctest::Approx(0.99966464986953352).epsilon(1e-12));
  CHECK(p[2] == doctest::Approx(0.00033535013046647816).epsilon(1e-12));
}

TEST_CASE("logit clamp keeps keep probabilities strictly interior") {
  GateSpec spec = bernoulli_gate({12.0, -40.0});
  clamp_logits(spec);
  CHECK(spec.logits[0] == 8.0);
  CHECK(spec.logits[1] == -8.0);
  const auto p = keep_probability(spec);
  CHECK(p[0] < 1.0);
  CHECK(p[1] > 0.0);
}

TEST_CASE("bernoulli masks are binary and match their rate") {
  const std::size_t n = 100000;
  SUBCASE("alpha = +8 keeps nearly everything") {
    GateSpec spec = bernoulli_gate({8.0});
    Rng rng(11);
    const Matrix m = sample_bernoulli_masks(spec, n, 1, rng);
    std::size_t ones = 0;
    for (double v : m.flat()) {
      CHECK((v == 0.0 || v == 1.0));
      ones += v == 1.0;
    }
    const double frac = static_cast<double>(ones) / n;
    CHECK(frac >= 0.998);
    CHECK(frac <= 1.0);
  }
  SUBCASE("alpha = 0 is a fair coin within the binomial CI") {
    GateSpec spec = bernoulli_gate({0.0});
    Rng rng(12);
    const Matrix m = sample_bernoulli_masks(spec, n, 1, rng);
    double mean = 0.0;
    for (double v : m.flat()) mean += v;
    mean /= n;
    CHECK(mean == doctest::Approx(0.5).epsilon(0.012));  // 0.5 +- 0.006
  }
  SUBCASE("per-layer granularity shares one draw across the width") {
    GateSpec spec = bernoulli_gate({0.0}, GateGranularity::per_layer);
    Rng rng(13);
    const Matrix m = sample_bernoulli_masks(spec, 64, 5, rng);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      for (std::size_t j = 1; j < 5; ++j) CHECK(m(i, j) == m(i, 0));
    }
  }
}

TEST_CASE("arm mask pair indicator table") {
  GateSpec spec = bernoulli_gate({0.0});
  SUBCASE("alpha=0, u=0.3 gives (0,1)") {
    const double u[] = {0.3};
    const ArmMaskPair pair = arm_mask_pair(spec, u);
    CHECK(pair.pseudo[0] == 0.0);
    CHECK(pair.truth[0] == 1.0);
  }
  SUBCASE("alpha=0, u=0.7 gives (1,0)") {
    const double u[] = {0.7};
    const ArmMaskPair pair = arm_mask_pair(spec, u);
    CHECK(pair.pseudo[0] == 1.0);
    CHECK(pair.truth[0] == 0.0);
  }
  SUBCASE("alpha=4, u=0.5 agrees at (1,1)") {
    GateSpec wide = bernoulli_gate({4.0});
    const double u[] = {0.5};
    const ArmMaskPair pair = arm_mask_pair(wide, u);
    CHECK(pair.pseudo[0] == 1.0);
    CHECK(pair.truth[0] == 1.0);
  }
  SUBCASE("dimension mismatch throws") {
    const double u[] = {0.1, 0.2};
    CHECK_THROWS_AS(arm_mask_pair(spec, u), DimensionError);
  }
}

TEST_CASE("arm marginal consistency: truth mask is Bernoulli(sigma(alpha))") {
  // Chi-square with 1 dof; p > 0.001 means the statistic stays below 10.828.
  const std::size_t n = 100000;
  for (double alpha : {-1.5, 0.0, 0.7, 3.0}) {
    GateSpec spec = bernoulli_gate({alpha});
    Rng rng(100 + static_cast<std::uint64_t>(alpha * 10));
    std::size_t ones = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double u[] = {rng.uniform()};
      ones += arm_mask_pair(spec, u).truth[0] == 1.0;
    }
    CHECK(testutil::chi_square_binary(ones, n, sigmoid(alpha)) < 10.828);
  }
}

TEST_CASE("arm antithetic symmetry at alpha=0: pseudo(u) = truth(1-u)") {
  GateSpec spec = bernoulli_gate({0.0});
  Rng rng(21);
  for (int i = 0; i < 1000; ++i) {
    double u = rng.uniform();
    if (u == 0.5) continue;
    const double ua[] = {u};
    const double ub[] = {1.0 - u};
    CHECK(arm_mask_pair(spec, ua).pseudo[0] == arm_mask_pair(spec, ub).truth[0]);
  }
}

TEST_CASE("arm agreement zone and disagreement fraction") {
  // The pair agrees exactly when u lies inside (min(p,1-p), max(p,1-p)),
  // so the disagreement fraction converges to 1 - |2p - 1|.
  const std::size_t n = 100000;
  for (double alpha : {-2.0, -0.5, 0.0, 1.0, 2.5}) {
    GateSpec spec = bernoulli_gate({alpha});
    const double p = sigmoid(alpha);
    const double lo = std::min(p, 1.0 - p);
    const double hi = std::max(p, 1.0 - p);
    Rng rng(200 + static_cast<std::uint64_t>(alpha * 4));
    std::size_t disagreements = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double u = rng.uniform();
      const double ua[] = {u};
      const ArmMaskPair pair = arm_mask_pair(spec, ua);
      const bool disagree = pair.pseudo[0] != pair.truth[0];
      if (u > lo && u < hi) CHECK_FALSE(disagree);
      if (u < lo || u > hi) CHECK(disagree);
      disagreements += disagree;
    }
    const double expected = 1.0 - std::abs(2.0 * p - 1.0);
    const double se = std::sqrt(expected * (1.0 - expected) / n) + 1e-9;
    CHECK(std::abs(static_cast<double>(disagreements) / n - expected) < 5.0 * se + 1e-3);
  }
}

TEST_CASE("concrete relaxation") {
  SUBCASE("u=0.5, alpha=0 gives mask 0.5 for any temperature") {
    for (double tau : {0.01, 0.1, 1.0, 10.0}) {
      CHECK(concrete_mask_from_uniform(0.0, tau, 0.5) == doctest::Approx(0.5));
    }
  }
  SUBCASE("pathwise derivative at mask 0.5, tau 0.1 is 2.5") {
    GateSpec spec;
    spec.kind = GateKind::concrete;
    spec.logits = {0.0};
    spec.concrete_temperature = 0.1;
    Rng rng(31);
    // mask(1-mask)/tau with mask = 0.5 -> 0.25 / 0.1.
    const double m = concrete_mask_from_uniform(0.0, 0.1, 0.5);
    CHECK(m * (1.0 - m) / 0.1 == doctest::Approx(2.5));
  }
  SUBCASE("low temperature approaches Bernoulli(sigma(alpha))") {
    GateSpec spec;
    spec.kind = GateKind::concrete;
    spec.logits = {2.0};
    spec.concrete_temperature = 0.01;
    Rng rng(32);
    const std::size_t n = 100000;
    const RelaxedMaskSample s = sample_concrete_masks(spec, n, 1, rng);
    std::size_t above = 0;
    double mean = 0.0;
    for (double v : s.mask.flat()) {
      above += v > 0.5;
      mean += v;
    }
    const double p = sigmoid(2.0);
    const double se = std::sqrt(p * (1.0 - p) / n);
    CHECK(std::abs(static_cast<double>(above) / n - p) < 4.0 * se);
    CHECK(std::abs(mean / n - p) < 0.01);  // sharpness of the expected mask
  }
}

TEST_CASE("gaussian gate") {
  GateSpec spec;
  spec.kind = GateKind::gaussian;
  spec.logits = {0.0};
  spec.gaussian_variance_cap = 1.0;
  const std::size_t n = 100000;
  SUBCASE("mean 1, variance cap*sigmoid(alpha)") {
    Rng rng(41);
    const RelaxedMaskSample s = sample_gaussian_masks(spec, n, 1, rng);
    double mean = 0.0;
    for (double v : s.mask.flat()) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : s.mask.flat()) var += (v - mean) * (v - mean);
    var /= n - 1;
    CHECK(std::abs(mean - 1.0) < 0.01);
    CHECK(std::abs(var - 0.5) < 0.01);
  }
  SUBCASE("variance floor: alpha=-8 concentrates near 1") {
    GateSpec tight = spec;
    tight.logits = {-8.0};
    Rng rng(42);
    const RelaxedMaskSample s = sample_gaussian_masks(tight, n, 1, rng);
    // sd = sqrt(sigma(-8)) ~ 0.0183, so |mask-1| < 0.1 is a 5.5-sigma event.
    std::size_t outside = 0;
    for (double v : s.mask.flat()) outside += std::abs(v - 1.0) > 0.1;
    CHECK(outside <= 2);
  }
}
