#include <cmath>

#include <doctest.h>

#include "lbd/bayes.hpp"
#include "lbd/error.hpp"
#include "lbd/estimators.hpp"
#include "testutil.hpp"

using namespace lbd;

namespace {

// {1, 2} net with one gated input neuron: the KL term sees a single row
// whose squared norm is exactly 2 when both weights are 1.
MlpModel one_row_net(double w0, double w1, double alpha) {
  MlpModel m = make_mlp({1, 2}, {Activation::identity});
  m.weights[0](0, 0) = w0;
  m.weights[0](0, 1) = w1;
  attach_gate(m, 0, GateKind::bernoulli, GateGranularity::per_neuron, alpha);
  return m;
}

MlpModel bayes_toy(Rng& rng) {
  MlpModel m = make_mlp({2, 3, 2}, {Activation::relu, Activation::identity});
  init_weights(m, rng);
  attach_gate(m, 0, GateKind::bernoulli, GateGranularity::per_neuron, 0.3);
  attach_gate(m, 1, GateKind::bernoulli, GateGranularity::per_neuron, -0.2);
  return m;
}

}  // namespace

TEST_CASE("kl regularizer reference values") {
  SUBCASE("keep 0.5, row norm 2, s^2 = 1: 0.5 - ln 2") {
    const MlpModel m = one_row_net(1.0, 1.0, 0.0);
    const KlTerm kl = kl_regularizer(m, 1.0);
    CHECK(kl.value == doctest::Approx(0.5 - std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("zero weight row, keep 0.5: -ln 2") {
    const MlpModel m = one_row_net(0.0, 0.0, 0.0);
    const KlTerm kl = kl_regularizer(m, 1.0);
    CHECK(kl.value == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("doubling s^2 halves the weight-norm part exactly") {
    Rng rng(3);
    MlpModel m = bayes_toy(rng);
    const KlTerm a = kl_regularizer(m, 1.0);
    const KlTerm b = kl_regularizer(m, 2.0);
    double entropy_sum = 0.0;
    for (const GateSpec& g : m.gates) {
      if (!g.gated()) continue;
      for (double al : g.logits) {
        const double p = sigmoid(al);
        entropy_sum += -p * std::log(p) - (1.0 - p) * std::log(1.0 - p);
      }
    }
    const double weight_part_a = a.value + entropy_sum;
    const double weight_part_b = b.value + entropy_sum;
    CHECK(weight_part_b == doctest::Approx(weight_part_a / 2.0).epsilon(1e-12));
  }
  SUBCASE("per-layer granularity is unsupported") {
    MlpModel m = make_mlp({2, 2}, {Activation::identity});
    attach_gate(m, 0, GateKind::bernoulli, GateGranularity::per_layer, 0.0);
    CHECK_THROWS_AS(kl_regularizer(m, 1.0), UnsupportedError);
  }
  SUBCASE("concrete gates are unsupported") {
    MlpModel m = one_row_net(1.0, 1.0, 0.0);
    m.gates[0].kind = GateKind::concrete;
    CHECK_THROWS_AS(kl_regularizer(m, 1.0), UnsupportedError);
  }
}

TEST_CASE("kl gradients match finite differences to 1e-6") {
  Rng rng(5);
  MlpModel m = bayes_toy(rng);
  const double s2 = 0.7;
  const KlTerm kl = kl_regularizer(m, s2);

  const std::vector<double> alpha = gate_logits(m);
  MlpModel probe = m;
  const auto value_at_alpha = [&](std::span<const double> a) {
    // kl_regularizer clamps nothing here; logits stay interior.
    std::size_t pos = 0;
    for (GateSpec& g : probe.gates) {
      if (!g.gated()) continue;
      for (double& v : g.logits) v = a[pos++];
    }
    return kl_regularizer(probe, s2).value;
  };
  const std::vector<double> fd_alpha = testutil::finite_difference(value_at_alpha, alpha);
  CHECK(testutil::max_rel_error(kl.dlogits, fd_alpha) <= 1e-6);

  // Weight gradients through the same oracle.
  std::vector<double> w0(m.weights[0].flat().begin(), m.weights[0].flat().end());
  MlpModel wprobe = m;
  const auto value_at_w = [&](std::span<const double> w) {
    std::copy(w.begin(), w.end(), wprobe.weights[0].flat().begin());
    return kl_regularizer(wprobe, s2).value;
  };
  const std::vector<double> fd_w = testutil::finite_difference(value_at_w, w0);
  const auto dw = kl.dweights[0].flat();
  CHECK(testutil::max_rel_error(std::vector<double>(dw.begin(), dw.end()), fd_w) <= 1e-6);
}

TEST_CASE("full Bayes objective: arm + analytic KL matches exact enumeration") {
  Rng rng(6);
  MlpModel m = bayes_toy(rng);
  Matrix x(16, 2), y(16, 2);
  for (double& v : x.flat()) v = rng.normal();
  for (std::size_t i = 0; i < 16; ++i) y(i, i % 2) = 1.0;
  const double scale = 1.0 / 16.0;
  const double kl_w = 1.0 / 16.0;

  const KlTerm kl = kl_regularizer(m, 1.0);
  const GradEstimate exact_nll =
      exact_gate_gradient(m, x, y, LossKind::softmax_cross_entropy, scale);
  Rng est(7);
  std::vector<GradEstimate> chunks;
  for (int c = 0; c < 20; ++c) {
    chunks.push_back(
        arm_gradient(m, x, y, LossKind::softmax_cross_entropy, scale, est, 100));
  }
  const EstimatorDiagnostics d = estimator_diagnostics(chunks, exact_nll);
  for (std::size_t k = 0; k < kl.dlogits.size(); ++k) {
    const double lhs_mean = d.bias[k] + exact_nll.grads[k] + kl_w * kl.dlogits[k];
    const double rhs = exact_nll.grads[k] + kl_w * kl.dlogits[k];
    const double se = d.stddev[k] / std::sqrt(20.0);
    CHECK(std::abs(lhs_mean - rhs) <= 4.0 * se);
  }
}

TEST_CASE("predictive posterior") {
  SUBCASE("saturated gates: MC entropy equals the deterministic entropy") {
    Rng rng(8);
    MlpModel m = make_mlp({2, 4, 3}, {Activation::relu, Activation::identity});
    init_weights(m, rng);
    attach_gate(m, 1, GateKind::bernoulli, GateGranularity::per_neuron, 8.0);
    Matrix x(3, 2);
    for (double& v : x.flat()) v = rng.normal();
    Rng eval(9);
    const PredictiveSummary mc = predictive_posterior(m, x, 7, eval);
    MlpModel plain = m;
    plain.gates[1] = GateSpec{};
    Rng eval2(10);
    const PredictiveSummary det = predictive_posterior(plain, x, 1, eval2);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(std::abs(mc.entropy[i] - det.entropy[i]) < 1e-3);
    }
  }
  SUBCASE("uniform probabilities give entropy ln C") {
    MlpModel m = make_mlp({2, 4}, {Activation::identity});  // zero weights
    Matrix x(2, 2, 1.0);
    Rng eval(11);
    const PredictiveSummary s = predictive_posterior(m, x, 3, eval);
    for (double h : s.entropy) CHECK(h == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("one-hot probabilities give entropy 0") {
    MlpModel m = make_mlp({1, 2}, {Activation::identity});
    m.weights[0](0, 0) = 60.0;
    Matrix x(1, 1, 1.0);
    Rng eval(12);
    const PredictiveSummary s = predictive_posterior(m, x, 2, eval);
    CHECK(s.entropy[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(s.predicted[0] == 0);
  }
  SUBCASE("entropy is invariant to class permutation") {
    Rng rng(13);
    MlpModel m = make_mlp({3, 4}, {Activation::identity});
    init_weights(m, rng);
    Matrix x(5, 3);
    for (double& v : x.flat()) v = rng.normal();
    Rng e1(14);
    const PredictiveSummary a = predictive_posterior(m, x, 1, e1);
    MlpModel permuted = m;  // rotate output columns by one
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < 4; ++c) {
        permuted.weights[0](r, (c + 1) % 4) = m.weights[0](r, c);
      }
    }
    Rng e2(15);
    const PredictiveSummary b = predictive_posterior(permuted, x, 1, e2);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(a.entropy[i] == doctest::Approx(b.entropy[i]).epsilon(1e-12));
    }
  }
  SUBCASE("softmax output layers are not re-normalized") {
    MlpModel raw = make_mlp({2, 3}, {Activation::identity});
    MlpModel soft = make_mlp({2, 3}, {Activation::softmax});
    Rng rng(16);
    init_weights(raw, rng);
    soft.weights = raw.weights;
    soft.biases = raw.biases;
    Matrix x(4, 2);
    for (double& v : x.flat()) v = rng.normal();
    Rng e1(17), e2(17);
    const PredictiveSummary a = predictive_posterior(raw, x, 1, e1);
    const PredictiveSummary b = predictive_posterior(soft, x, 1, e2);
    CHECK(approx_equal(a.mean_probs, b.mean_probs, 1e-12));
  }
}

namespace {

PredictiveSummary summary_from(std::vector<double> entropy,
                               std::vector<std::size_t> predicted) {
  PredictiveSummary s;
  s.entropy = std::move(entropy);
  s.predicted = std::move(predicted);
  s.mean_probs = Matrix(s.entropy.size(), 2, 0.5);
  return s;
}

}  // namespace

TEST_CASE("pavpu") {
  SUBCASE("hand-built 10-prediction case gives 0.9") {
    // 8 accurate+certain, 1 inaccurate+certain, 1 inaccurate+uncertain.
    std::vector<double> entropy(10, 0.1);
    entropy[9] = 0.9;
    std::vector<std::size_t> predicted(10, 0);
    std::vector<std::size_t> labels(10, 0);
    labels[8] = 1;  // inaccurate but certain
    labels[9] = 1;  // inaccurate and uncertain
    const PredictiveSummary s = summary_from(entropy, predicted);
    const PavpuReport r = pavpu(s, labels, 0.5);
    CHECK(r.n_ac == 8);
    CHECK(r.n_ic == 1);
    CHECK(r.n_au == 0);
    CHECK(r.n_iu == 1);
    CHECK(r.pavpu == doctest::Approx(0.9));
  }
  SUBCASE("t = 1 reduces to plain accuracy") {
    Rng rng(20);
    std::vector<double> entropy;
    std::vector<std::size_t> predicted, labels;
    for (int i = 0; i < 50; ++i) {
      entropy.push_back(rng.uniform());
      predicted.push_back(i % 2);
      labels.push_back(rng.uniform() < 0.6 ? i % 2 : 1 - i % 2);
    }
    const PredictiveSummary s = summary_from(entropy, predicted);
    const PavpuReport r = pavpu(s, labels, 1.0);
    std::size_t hits = 0;
    for (int i = 0; i < 50; ++i) hits += predicted[i] == labels[i];
    CHECK(r.pavpu == static_cast<double>(hits) / 50.0);
    CHECK(r.n_au == 0);
    CHECK(r.n_iu == 0);
  }
  SUBCASE("all accurate and certain gives 1.0") {
    const PredictiveSummary s =
        summary_from(std::vector<double>(6, 0.2), std::vector<std::size_t>(6, 1));
    const std::vector<std::size_t> labels(6, 1);
    CHECK(pavpu(s, labels, 0.7).pavpu == 1.0);
  }
  SUBCASE("empty input is an error") {
    const PredictiveSummary s = summary_from({}, {});
    CHECK_THROWS_AS(pavpu(s, {}, 0.5), ConfigError);
  }
}

TEST_CASE("pavpu sweep") {
  Rng rng(21);
  std::vector<double> entropy;
  std::vector<std::size_t> predicted, labels;
  for (int i = 0; i < 40; ++i) {
    entropy.push_back(rng.uniform());
    predicted.push_back(0);
    labels.push_back(rng.uniform() < 0.7 ? 0 : 1);
  }
  const PredictiveSummary s = summary_from(entropy, predicted);
  std::vector<double> ts;
  for (int i = 0; i <= 4; ++i) ts.push_back(0.25 * i);
  const PavpuSweep sweep = pavpu_sweep(s, labels, ts);
  SUBCASE("reports are ordered by t and the mean is the arithmetic mean") {
    double sum = 0.0;
    for (std::size_t i = 0; i < sweep.reports.size(); ++i) {
      CHECK(sweep.reports[i].threshold_t == ts[i]);
      sum += sweep.reports[i].pavpu;
    }
    CHECK(std::abs(sweep.mean_pavpu - sum / 5.0) < 1e-12);
  }
  SUBCASE("constant entropies make every threshold identical") {
    const PredictiveSummary flat =
        summary_from(std::vector<double>(40, 0.3),
                     std::vector<std::size_t>(predicted));
    const PavpuSweep fs = pavpu_sweep(flat, labels, ts);
    for (const PavpuReport& r : fs.reports) {
      CHECK(r.pavpu == fs.reports.front().pavpu);
      CHECK(r.n_au + r.n_iu == 0);
    }
  }
}
