#include <cmath>

#include <doctest.h>

#include "lbd/error.hpp"
#include "lbd/sivae.hpp"
#include "testutil.hpp"

using namespace lbd;

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

SivaeModel tiny_model(Rng& rng, std::size_t data_dim, std::size_t hidden,
                      std::size_t latent, Likelihood lik) {
  SivaeModel m;
  m.latent_dim = latent;
  m.likelihood = lik;
  m.beta = 1.0;
  m.encoder = make_mlp({data_dim, hidden, 2 * latent},
                       {Activation::relu, Activation::identity});
  m.decoder = make_mlp({latent, hidden, data_dim},
                       {Activation::relu, Activation::identity});
  init_weights(m.encoder, rng);
  init_weights(m.decoder, rng);
  attach_gate(m.encoder, 0, GateKind::bernoulli, GateGranularity::per_neuron, 0.0);
  return m;
}

MaskSet ones_block(const SivaeModel& m, std::size_t batch) {
  return ones_masks(m.encoder, batch);
}

// Standard beta-weighted bound with an explicit mask:
//   -[ log p(x|eta) + beta (log p(eta) - log q(eta|x,z)) ]
double reference_elbo_loss(const SivaeModel& m, std::span<const double> x_row,
                           std::span<const double> eta_row, const GaussianParams& comp,
                           std::size_t i) {
  Matrix eta_m(1, m.latent_dim);
  for (std::size_t d = 0; d < m.latent_dim; ++d) eta_m(0, d) = eta_row[d];
  const Matrix dec = forward_eval(m.decoder, eta_m, MaskSet{});
  double lpx = 0.0;
  switch (m.likelihood) {
    case Likelihood::multinomial:
      lpx = multinomial_log_likelihood(dec.row(0), x_row);
      break;
    case Likelihood::bernoulli: {
      for (std::size_t j = 0; j < x_row.size(); ++j) {
        const double l = dec(0, j);
        const double sp_pos = l > 0 ? l + std::log1p(std::exp(-l)) : std::log1p(std::exp(l));
        const double sp_neg = -l > 0 ? -l + std::log1p(std::exp(l)) : std::log1p(std::exp(-l));
        lpx += -x_row[j] * sp_neg - (1.0 - x_row[j]) * sp_pos;
      }
      break;
    }
    case Likelihood::gaussian:
      for (std::size_t j = 0; j < x_row.size(); ++j) {
        const double d = x_row[j] - dec(0, j);
        lpx += -0.5 * (d * d + kLog2Pi);
      }
      break;
  }
  double lp_eta = 0.0;
  for (std::size_t d = 0; d < m.latent_dim; ++d) {
    lp_eta += -0.5 * (eta_row[d] * eta_row[d] + kLog2Pi);
  }
  std::vector<double> mu(m.latent_dim), var(m.latent_dim);
  for (std::size_t d = 0; d < m.latent_dim; ++d) {
    mu[d] = comp.mean(i, d);
    var[d] = comp.var(i, d);
  }
  const double lq = gaussian_log_density(eta_row, mu, var);
  return -(lpx + m.beta * (lp_eta - lq));
}

}  // namespace

TEST_CASE("gaussian log density reference values") {
  SUBCASE("eta = mu, identity covariance: -(d/2) ln 2pi") {
    const std::vector<double> mu = {0.3, -0.7};
    const std::vector<double> var = {1.0, 1.0};
    CHECK(gaussian_log_density(mu, mu, var) ==
          doctest::Approx(-kLog2Pi).epsilon(1e-12));
  }
  SUBCASE("unit displacement on one axis costs 0.5") {
    const std::vector<double> mu = {0.0, 0.0};
    const std::vector<double> eta = {1.0, 0.0};
    const std::vector<double> var = {1.0, 1.0};
    CHECK(gaussian_log_density(eta, mu, var) ==
          doctest::Approx(-kLog2Pi - 0.5).epsilon(1e-12));
  }
  SUBCASE("hand computation for diag(2, 0.5), displacement (1,1)") {
    const std::vector<double> mu = {0.0, 0.0};
    const std::vector<double> eta = {1.0, 1.0};
    const std::vector<double> var = {2.0, 0.5};
    // -(1/2)[2 ln 2pi + ln 2 + ln 0.5 + 1/2 + 2] = -ln 2pi - 1.25
    CHECK(gaussian_log_density(eta, mu, var) ==
          doctest::Approx(-kLog2Pi - 1.25).epsilon(1e-12));
  }
  SUBCASE("nonpositive variance is a numeric error") {
    const std::vector<double> v0 = {0.0};
    const std::vector<double> z = {0.0};
    CHECK_THROWS_AS(gaussian_log_density(z, z, v0), NumericError);
  }
}

TEST_CASE("multinomial log likelihood") {
  SUBCASE("one-hot at the argmax of (10, 0, 0)") {
    const std::vector<double> logits = {10.0, 0.0, 0.0};
    const std::vector<double> x = {1.0, 0.0, 0.0};
    // log softmax evaluation: -log(1 + 2 e^-10).
    CHECK(multinomial_log_likelihood(logits, x) ==
          doctest::Approx(-std::log1p(2.0 * std::exp(-10.0))).epsilon(1e-12));
  }
  SUBCASE("uniform logits with x = (1,1): 2 ln(1/2)") {
    const std::vector<double> logits = {0.0, 0.0};
    const std::vector<double> x = {1.0, 1.0};
    CHECK(multinomial_log_likelihood(logits, x) ==
          doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-12));
  }
  SUBCASE("adding a constant to all logits changes nothing") {
    Rng rng(3);
    std::vector<double> logits = {0.4, -1.2, 2.0, 0.3};
    std::vector<double> x = {1.0, 0.0, 2.0, 1.0};
    const double base = multinomial_log_likelihood(logits, x);
    for (double& l : logits) l += 7.3;
    CHECK(multinomial_log_likelihood(logits, x) == doctest::Approx(base).epsilon(1e-12));
  }
  SUBCASE("negative counts are rejected") {
    const std::vector<double> logits = {0.0, 0.0};
    const std::vector<double> x = {-1.0, 1.0};
    CHECK_THROWS_AS(multinomial_log_likelihood(logits, x), ConfigError);
  }
}

TEST_CASE("beta schedule is a clamped linear ramp") {
  CHECK(beta_schedule(0, 100, 1.0) == 0.0);
  CHECK(beta_schedule(100, 100, 1.0) == 1.0);
  CHECK(beta_schedule(50, 100, 1.0) == doctest::Approx(0.5));
  CHECK(beta_schedule(250, 100, 0.8) == 0.8);
  CHECK_THROWS_AS(beta_schedule(1, 0, 1.0), ConfigError);
}

TEST_CASE("encode") {
  Rng rng(4);
  SivaeModel m = tiny_model(rng, 3, 5, 2, Likelihood::gaussian);
  Matrix x(2, 3);
  for (double& v : x.flat()) v = rng.normal();
  SUBCASE("identical masks give identical parameters") {
    const GaussianParams a = encode(m, x, ones_block(m, 2));
    const GaussianParams b = encode(m, x, ones_block(m, 2));
    CHECK(approx_equal(a.mean, b.mean, 0.0));
    CHECK(approx_equal(a.var, b.var, 0.0));
  }
  SUBCASE("masking a used input feature changes the mean") {
    MaskSet dropped = ones_block(m, 2);
    dropped.by_layer[0](0, 0) = 0.0;
    const GaussianParams a = encode(m, x, ones_block(m, 2));
    const GaussianParams b = encode(m, x, dropped);
    bool differs = false;
    for (std::size_t d = 0; d < 2; ++d) differs |= a.mean(0, d) != b.mean(0, d);
    CHECK(differs);
  }
  SUBCASE("zero input with zero biases encodes to mean zero") {
    const Matrix zero(2, 3, 0.0);
    const GaussianParams p = encode(m, zero, ones_block(m, 2));
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t d = 0; d < 2; ++d) CHECK(p.mean(i, d) == 0.0);
    }
  }
  SUBCASE("shape violations are dimension errors") {
    SivaeModel bad = m;
    bad.latent_dim = 3;  // encoder still emits 4 outputs
    CHECK_THROWS_AS(bad.validate(), DimensionError);
  }
}

TEST_CASE("sivae objective with V=0 equals the mask-conditioned bound exactly") {
  Rng rng(5);
  SivaeModel m = tiny_model(rng, 4, 5, 2, Likelihood::multinomial);
  m.beta = 0.7;
  Matrix x(3, 4, 0.0);
  x(0, 0) = 1.0;
  x(1, 2) = 1.0;
  x(1, 3) = 1.0;
  x(2, 1) = 1.0;
  Rng draw(6);
  const SivaeEval ev = sivae_objective(m, x, 0, draw);
  for (std::size_t i = 0; i < 3; ++i) {
    const double ref =
        reference_elbo_loss(m, x.row(i), ev.eta.row(i), ev.components[0], i);
    CHECK(ev.per_example[i] == doctest::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("saturated gates reduce the objective to the standard beta bound") {
  Rng rng(7);
  SivaeModel m = tiny_model(rng, 6, 4, 2, Likelihood::multinomial);
  m.beta = 0.9;
  set_gate_logits(m.encoder, std::vector<double>(6, 8.0));
  Matrix x(3, 6, 0.0);
  x(0, 0) = 1.0;
  x(1, 3) = 1.0;
  x(2, 5) = 1.0;
  for (int V : {0, 1, 10}) {
    Rng draw(8);
    const SivaeEval ev = sivae_objective(m, x, V, draw);
    // Saturated-gate limit realized under this seed; the check below is
    // the reduction identity, so the precondition must hold.
    for (const MaskSet& blocks : ev.mask_blocks) {
      for (double v : blocks.by_layer[0].flat()) REQUIRE(v == 1.0);
    }
    const GaussianParams comp = encode(m, x, ones_block(m, 3));
    for (std::size_t i = 0; i < 3; ++i) {
      const double ref = reference_elbo_loss(m, x.row(i), ev.eta.row(i), comp, i);
      CHECK(ev.per_example[i] == doctest::Approx(ref).epsilon(1e-6));
    }
  }
}

TEST_CASE("identical mask blocks make the objective independent of V exactly") {
  Rng rng(9);
  SivaeModel m = tiny_model(rng, 4, 4, 2, Likelihood::multinomial);
  Matrix x(2, 4, 0.0);
  x(0, 1) = 1.0;
  x(1, 2) = 1.0;
  Matrix eps(2, 2);
  Rng erng(10);
  for (double& v : eps.flat()) v = erng.normal();
  std::vector<double> base;
  for (int V : {0, 1, 4}) {
    const std::vector<MaskSet> blocks(static_cast<std::size_t>(V) + 1,
                                      ones_block(m, 2));
    const std::vector<double> losses = sivae_replay_losses(m, x, blocks, eps);
    if (base.empty()) {
      base = losses;
    } else {
      for (std::size_t i = 0; i < losses.size(); ++i) CHECK(losses[i] == base[i]);
    }
  }
}

TEST_CASE("mixture log term is bounded by the component extremes") {
  Rng rng(11);
  SivaeModel m = tiny_model(rng, 5, 4, 2, Likelihood::multinomial);
  Matrix x(4, 5, 0.0);
  for (std::size_t i = 0; i < 4; ++i) x(i, i) = 1.0;
  Rng draw(12);
  const int V = 3;
  const SivaeEval ev = sivae_objective(m, x, V, draw);
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<double> logq;
    for (const GaussianParams& c : ev.components) {
      std::vector<double> mu(2), var(2);
      for (std::size_t d = 0; d < 2; ++d) {
        mu[d] = c.mean(i, d);
        var[d] = c.var(i, d);
      }
      logq.push_back(gaussian_log_density(ev.eta.row(i), mu, var));
    }
    const double lo = *std::min_element(logq.begin(), logq.end());
    const double hi = *std::max_element(logq.begin(), logq.end());
    // Reconstruct log qmix from the recorded loss pieces:
    //   loss = -(lpx + beta (lp_eta - log qmix)).
    const double lpx = [&] {
      Matrix eta_m(1, 2);
      eta_m(0, 0) = ev.eta(i, 0);
      eta_m(0, 1) = ev.eta(i, 1);
      const Matrix dec = forward_eval(m.decoder, eta_m, MaskSet{});
      return multinomial_log_likelihood(dec.row(0), x.row(i));
    }();
    double lp_eta = 0.0;
    for (std::size_t d = 0; d < 2; ++d) {
      lp_eta += -0.5 * (ev.eta(i, d) * ev.eta(i, d) + kLog2Pi);
    }
    const double log_qmix = lp_eta - (-(ev.per_example[i]) - lpx) / m.beta;
    CHECK(log_qmix >= lo - 1e-9);
    CHECK(log_qmix <= hi + 1e-9);
  }
}

TEST_CASE("pathwise parameter gradients match replay finite differences") {
  Rng rng(13);
  SivaeModel m = tiny_model(rng, 3, 4, 2, Likelihood::multinomial);
  m.beta = 0.8;
  Matrix x(4, 3, 0.0);
  x(0, 0) = 1.0;
  x(1, 1) = 1.0;
  x(2, 2) = 1.0;
  x(3, 0) = 1.0;
  x(3, 2) = 1.0;
  Rng draw(14);
  const SivaeEval ev = sivae_objective(m, x, 2, draw);

  const auto mean_loss = [&](const SivaeModel& probe) {
    const std::vector<double> losses =
        sivae_replay_losses(probe, x, ev.mask_blocks, ev.eps);
    double tot = 0.0;
    for (double l : losses) tot += l;
    return tot / static_cast<double>(losses.size());
  };

  double worst = 0.0;
  SivaeModel probe = m;
  auto check_block = [&](Matrix& weights, const Matrix& analytic) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      const double keep = weights.flat()[i];
      const double h = 1e-6;
      weights.flat()[i] = keep + h;
      const double hi = mean_loss(probe);
      weights.flat()[i] = keep - h;
      const double lo = mean_loss(probe);
      weights.flat()[i] = keep;
      const double fd = (hi - lo) / (2.0 * h);
      worst = std::max(worst, testutil::rel_error(fd, analytic.flat()[i]));
    }
  };
  for (std::size_t j = 0; j < m.encoder.depth(); ++j) {
    check_block(probe.encoder.weights[j], ev.encoder_grads.weights[j]);
  }
  for (std::size_t j = 0; j < m.decoder.depth(); ++j) {
    check_block(probe.decoder.weights[j], ev.decoder_grads.weights[j]);
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("relaxed-gate alpha gradients are the seeded-replay derivative") {
  // With a fixed rng seed the drawn noise is independent of alpha, so
  // finite differences across alpha equal the pathwise gradient.
  for (GateKind kind : {GateKind::concrete, GateKind::gaussian}) {
    Rng rng(15);
    SivaeModel m = tiny_model(rng, 3, 4, 2, Likelihood::multinomial);
    m.encoder.gates[0].kind = kind;
    m.encoder.gates[0].concrete_temperature = 0.4;
    set_gate_logits(m.encoder, std::vector<double>{0.3, -0.5, 0.7});
    Matrix x(3, 3, 0.0);
    for (std::size_t i = 0; i < 3; ++i) x(i, i) = 1.0;
    const std::uint64_t seed = 16;
    Rng draw(seed);
    const SivaeEval ev = sivae_objective(m, x, 2, draw);
    REQUIRE(ev.alpha_grads.size() == 3);
    const std::vector<double> alpha = gate_logits(m.encoder);
    SivaeModel probe = m;
    const auto loss_at = [&](std::span<const double> a) {
      set_gate_logits(probe.encoder, a);
      Rng r(seed);
      return sivae_objective(probe, x, 2, r).loss;
    };
    const std::vector<double> fd = testutil::finite_difference(loss_at, alpha, 1e-6);
    CHECK(testutil::max_rel_error(ev.alpha_grads, fd) <= 1e-4);
  }
}

TEST_CASE("sivae arm gradient matches an enumeration + MC oracle") {
  // One gate bit, V = 1: enumerate the joint (z, z_aux) configurations,
  // estimate E[loss | config] by a large eps-average, and fold the exact
  // Bernoulli derivative over both blocks. Gaussian likelihood keeps the
  // decoder informative with a single item.
  Rng rng(17);
  SivaeModel m = tiny_model(rng, 1, 3, 1, Likelihood::gaussian);
  set_gate_logits(m.encoder, std::vector<double>{0.4});
  Matrix x(1, 1);
  x(0, 0) = 0.8;
  const double a = 0.4;
  const double p = sigmoid(a);

  // E[loss | z, z_aux] by eps-MC with a fixed stream.
  const int n_eps = 60000;
  double cond_mean[2][2];
  double cond_se[2][2];
  for (int z0 = 0; z0 < 2; ++z0) {
    for (int z1 = 0; z1 < 2; ++z1) {
      std::vector<MaskSet> blocks(2);
      for (int b = 0; b < 2; ++b) {
        blocks[b].by_layer.resize(m.encoder.depth());
        blocks[b].by_layer[0] = Matrix(1, 1, b == 0 ? double(z0) : double(z1));
      }
      Rng erng(18);
      std::vector<double> losses(n_eps);
      Matrix eps(1, 1);
      for (int s = 0; s < n_eps; ++s) {
        eps(0, 0) = erng.normal();
        losses[s] = sivae_replay_losses(m, x, blocks, eps)[0];
      }
      const auto st = testutil::mean_sd(losses);
      cond_mean[z0][z1] = st.mean;
      cond_se[z0][z1] = st.se;
    }
  }
  // d/da sum over configs of p(z0) p(z1) E[loss]: product-rule weights.
  const double sp = p * (1.0 - p);
  double oracle = 0.0;
  double oracle_se2 = 0.0;
  for (int z0 = 0; z0 < 2; ++z0) {
    for (int z1 = 0; z1 < 2; ++z1) {
      const double pz0 = z0 ? p : 1.0 - p;
      const double pz1 = z1 ? p : 1.0 - p;
      const double coeff = sp * ((z0 ? 1.0 : -1.0) * pz1 + (z1 ? 1.0 : -1.0) * pz0);
      oracle += coeff * cond_mean[z0][z1];
      oracle_se2 += coeff * coeff * cond_se[z0][z1] * cond_se[z0][z1];
    }
  }

  Rng arm_rng(19);
  std::vector<double> means;
  for (int c = 0; c < 30; ++c) {
    means.push_back(sivae_alpha_gradient_arm(m, x, 1, 1.0, arm_rng, 400).grads[0]);
  }
  const auto st = testutil::mean_sd(means);
  const double combined = std::sqrt(st.se * st.se + oracle_se2);
  CHECK(std::abs(st.mean - oracle) <= 4.0 * combined);
}

TEST_CASE("sivae bound stays below an importance-sampling log likelihood") {
  Rng rng(20);
  SivaeModel m = tiny_model(rng, 4, 4, 2, Likelihood::bernoulli);
  set_gate_logits(m.encoder, std::vector<double>{0.5, -0.3, 0.8, 0.0});
  Matrix x(1, 4);
  x(0, 0) = 1.0;
  x(0, 2) = 1.0;

  // Long-run importance sampling of log p(x) with the exact 16-component
  // mask-marginal encoder mixture as the proposal.
  std::vector<double> pz(16);
  std::vector<GaussianParams> comps(16);
  const std::vector<double> alpha = gate_logits(m.encoder);
  for (int cfg = 0; cfg < 16; ++cfg) {
    double prob = 1.0;
    MaskSet masks;
    masks.by_layer.resize(m.encoder.depth());
    masks.by_layer[0] = Matrix(1, 4);
    for (int k = 0; k < 4; ++k) {
      const bool bit = (cfg >> k) & 1;
      masks.by_layer[0](0, k) = bit ? 1.0 : 0.0;
      prob *= bit ? sigmoid(alpha[k]) : 1.0 - sigmoid(alpha[k]);
    }
    pz[cfg] = prob;
    comps[cfg] = encode(m, x, masks);
  }
  const int n_is = 100000;
  Rng is_rng(21);
  std::vector<double> log_w(n_is);
  for (int s = 0; s < n_is; ++s) {
    double u = is_rng.uniform();
    int cfg = 0;
    while (cfg < 15 && u > pz[cfg]) {
      u -= pz[cfg];
      ++cfg;
    }
    std::vector<double> eta(2), mu(2), var(2);
    for (int d = 0; d < 2; ++d) {
      mu[d] = comps[cfg].mean(0, d);
      var[d] = comps[cfg].var(0, d);
      eta[d] = mu[d] + std::sqrt(var[d]) * is_rng.normal();
    }
    double log_qm = -1e300;
    std::vector<double> terms(16);
    double mx = -1e300;
    for (int c = 0; c < 16; ++c) {
      std::vector<double> cmu(2), cvar(2);
      for (int d = 0; d < 2; ++d) {
        cmu[d] = comps[c].mean(0, d);
        cvar[d] = comps[c].var(0, d);
      }
      terms[c] = std::log(pz[c]) + gaussian_log_density(eta, cmu, cvar);
      mx = std::max(mx, terms[c]);
    }
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - mx);
    log_qm = mx + std::log(acc);

    Matrix eta_m(1, 2);
    eta_m(0, 0) = eta[0];
    eta_m(0, 1) = eta[1];
    const Matrix dec = forward_eval(m.decoder, eta_m, MaskSet{});
    double lpx = 0.0;
    for (int j = 0; j < 4; ++j) {
      const double l = dec(0, j);
      const double sp_pos = l > 0 ? l + std::log1p(std::exp(-l)) : std::log1p(std::exp(l));
      const double sp_neg = -l > 0 ? -l + std::log1p(std::exp(l)) : std::log1p(std::exp(-l));
      lpx += -x(0, j) * sp_neg - (1.0 - x(0, j)) * sp_pos;
    }
    double lp_eta = 0.0;
    for (int d = 0; d < 2; ++d) lp_eta += -0.5 * (eta[d] * eta[d] + kLog2Pi);
    log_w[s] = lpx + lp_eta - log_qm;
  }
  double mx = -1e300;
  for (double w : log_w) mx = std::max(mx, w);
  double acc = 0.0;
  for (double w : log_w) acc += std::exp(w - mx);
  const double log_px = mx + std::log(acc / n_is);

  // Bound estimates: replicate the single example into a batch so each row
  // draws independent masks and noise.
  for (int V : {0, 1, 4}) {
    const int reps = 400;
    Matrix xr(reps, 4);
    for (int i = 0; i < reps; ++i) {
      for (int j = 0; j < 4; ++j) xr(i, j) = x(0, j);
    }
    Rng draw(22 + V);
    std::vector<double> values;
    for (int round = 0; round < 50; ++round) {
      const SivaeEval ev = sivae_objective(m, xr, V, draw);
      for (double l : ev.per_example) values.push_back(-l);
    }
    const auto st = testutil::mean_sd(values);
    CHECK(st.mean + 4.0 * st.se <= log_px);
  }
}
