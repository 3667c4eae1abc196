#include "lbd/bayes.hpp"

#include <algorithm>
#include <cmath>

#include "lbd/error.hpp"
#include "lbd/estimators.hpp"

namespace lbd {

KlTerm kl_regularizer(const MlpModel& model, double prior_variance) {
  if (prior_variance <= 0.0) {
    throw ConfigError("kl_regularizer: prior variance must be positive");
  }
  model.validate();
  KlTerm out;
  out.dweights.resize(model.depth());
  for (std::size_t j = 0; j < model.depth(); ++j) {
    const GateSpec& g = model.gates[j];
    if (!g.gated()) continue;
    if (g.kind != GateKind::bernoulli) {
      throw UnsupportedError("kl_regularizer: gates must be bernoulli");
    }
    if (g.granularity != GateGranularity::per_neuron) {
      throw UnsupportedError(
          "kl_regularizer: per-layer gates unsupported; the column term needs "
          "per-neuron rates");
    }
    const Matrix& w = model.weights[j];
    Matrix dw(w.rows(), w.cols());
    for (std::size_t k = 0; k < w.rows(); ++k) {
      const double a = g.logits[k];
      const double p = sigmoid(a);
      const auto wrow = w.row(k);
      double norm2 = 0.0;
      for (double v : wrow) norm2 += v * v;
      const double entropy = -p * std::log(p) - (1.0 - p) * std::log(1.0 - p);
      out.value += p / (2.0 * prior_variance) * norm2 - entropy;
      // dH/da = -a * sigma'(a), so the a-gradient collapses neatly.
      out.dlogits.push_back(sigmoid_grad(a) * (norm2 / (2.0 * prior_variance) + a));
      const double wcoef = p / prior_variance;
      const auto drow = dw.row(k);
      for (std::size_t c = 0; c < wrow.size(); ++c) drow[c] = wcoef * wrow[c];
    }
    out.dweights[j] = std::move(dw);
  }
  if (out.dlogits.empty()) throw ConfigError("kl_regularizer: model has no gates");
  return out;
}

namespace {

double row_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace

PredictiveSummary predictive_posterior(const MlpModel& model, const Matrix& inputs,
                                       int mc_passes, Rng& rng) {
  if (mc_passes < 1) throw ConfigError("predictive_posterior: need S >= 1");
  const bool softmax_out = model.activations.back() == Activation::softmax;
  const std::size_t batch = inputs.rows();
  const std::size_t classes = model.output_dim();
  Matrix mean(batch, classes);
  Matrix probs(batch, classes);
  for (int s = 0; s < mc_passes; ++s) {
    const MaskSet masks = sample_masks(model, batch, rng);
    const Matrix out = forward_eval(model, inputs, masks);
    if (softmax_out) {
      probs = out;
    } else {
      for (std::size_t i = 0; i < batch; ++i) {
        const auto o = out.row(i);
        double mx = o[0];
        for (double v : o) mx = std::max(mx, v);
        double sum = 0.0;
        const auto prow = probs.row(i);
        for (std::size_t c = 0; c < classes; ++c) {
          prow[c] = std::exp(o[c] - mx);
          sum += prow[c];
        }
        for (std::size_t c = 0; c < classes; ++c) prow[c] /= sum;
      }
    }
    add_inplace(mean, probs);
  }
  scale_inplace(mean, 1.0 / static_cast<double>(mc_passes));

  PredictiveSummary out;
  out.mean_probs = std::move(mean);
  out.entropy.resize(batch);
  out.predicted.resize(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const auto prow = out.mean_probs.row(i);
    out.entropy[i] = row_entropy(prow);
    std::size_t arg = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (prow[c] > prow[arg]) arg = c;
    }
    out.predicted[i] = arg;
  }
  return out;
}

void score_against_labels(PredictiveSummary& summary,
                          std::span<const std::size_t> labels) {
  if (labels.size() != summary.predicted.size()) {
    throw DimensionError("score_against_labels: label count mismatch");
  }
  summary.correct.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    summary.correct[i] = summary.predicted[i] == labels[i] ? 1 : 0;
  }
}

PavpuReport pavpu(const PredictiveSummary& summary,
                  std::span<const std::size_t> labels, double t) {
  if (summary.entropy.empty()) throw ConfigError("pavpu: empty summary");
  if (labels.size() != summary.entropy.size()) {
    throw DimensionError("pavpu: label count mismatch");
  }
  if (t < 0.0 || t > 1.0) throw ConfigError("pavpu: t must lie in [0, 1]");

  double lo = summary.entropy[0];
  double hi = summary.entropy[0];
  for (double h : summary.entropy) {
    lo = std::min(lo, h);
    hi = std::max(hi, h);
  }
  PavpuReport r;
  r.threshold_t = t;
  r.entropy_threshold = lo + t * (hi - lo);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool accurate = summary.predicted[i] == labels[i];
    const bool uncertain = summary.entropy[i] > r.entropy_threshold;
    if (accurate && !uncertain) ++r.n_ac;
    if (accurate && uncertain) ++r.n_au;
    if (!accurate && !uncertain) ++r.n_ic;
    if (!accurate && uncertain) ++r.n_iu;
  }
  const double total = static_cast<double>(r.n_ac + r.n_au + r.n_ic + r.n_iu);
  r.pavpu = (static_cast<double>(r.n_iu) + static_cast<double>(r.n_ac)) / total;
  return r;
}

PavpuSweep pavpu_sweep(const PredictiveSummary& summary,
                       std::span<const std::size_t> labels,
                       std::span<const double> ts) {
  PavpuSweep sweep;
  sweep.reports.reserve(ts.size());
  double sum = 0.0;
  for (double t : ts) {
    sweep.reports.push_back(pavpu(summary, labels, t));
    sum += sweep.reports.back().pavpu;
  }
  sweep.mean_pavpu = ts.empty() ? 0.0 : sum / static_cast<double>(ts.size());
  return sweep;
}

}  // namespace lbd
