#include "lbd/estimators.hpp"

#include <cmath>
#include <cstdio>

#include "lbd/error.hpp"

namespace lbd {

const char* estimator_name(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::arm: return "arm";
    case EstimatorKind::reinforce: return "reinforce";
    case EstimatorKind::concrete_pathwise: return "concrete-pathwise";
    case EstimatorKind::gaussian_pathwise: return "gaussian-pathwise";
    case EstimatorKind::exact: return "exact";
  }
  return "?";
}

GateLayout gate_layout(const MlpModel& model) {
  GateLayout layout;
  for (std::size_t j = 0; j < model.depth(); ++j) {
    const GateSpec& g = model.gates[j];
    if (!g.gated()) continue;
    GateLayout::Block b;
    b.layer = j;
    b.offset = layout.total;
    b.count = g.logits.size();
    b.width = model.layer_sizes[j];
    layout.total += b.count;
    layout.blocks.push_back(b);
  }
  return layout;
}

std::vector<double> gate_logits(const MlpModel& model) {
  std::vector<double> out;
  for (const GateSpec& g : model.gates) {
    if (g.gated()) out.insert(out.end(), g.logits.begin(), g.logits.end());
  }
  return out;
}

void set_gate_logits(MlpModel& model, std::span<const double> logits) {
  std::size_t pos = 0;
  for (GateSpec& g : model.gates) {
    if (!g.gated()) continue;
    if (pos + g.logits.size() > logits.size()) {
      throw DimensionError("set_gate_logits: too few logits supplied");
    }
    for (double& a : g.logits) a = logits[pos++];
    clamp_logits(g);
  }
  if (pos != logits.size()) {
    throw DimensionError("set_gate_logits: too many logits supplied");
  }
}

namespace {

void require_gate_kind(const MlpModel& model, GateKind kind, const char* op) {
  bool any = false;
  for (const GateSpec& g : model.gates) {
    if (!g.gated()) continue;
    any = true;
    if (g.kind != kind) {
      throw UnsupportedError(std::string(op) + ": estimator does not support this gate kind");
    }
  }
  if (!any) throw ConfigError(std::string(op) + ": model has no gates");
}

void check_batch(const Matrix& inputs, const Matrix& targets, const char* op) {
  if (inputs.rows() != targets.rows() || inputs.rows() == 0) {
    throw DimensionError(std::string(op) + ": inputs/targets batch mismatch");
  }
}

// Materialize per-layer masks for the rows of `bits` (batch x layout.total).
MaskSet masks_from_bits(const MlpModel& model, const GateLayout& layout,
                        const Matrix& bits) {
  MaskSet ms;
  ms.by_layer.resize(model.depth());
  for (const auto& b : layout.blocks) {
    Matrix m(bits.rows(), b.width);
    for (std::size_t i = 0; i < bits.rows(); ++i) {
      if (b.count == 1) {
        const double v = bits(i, b.offset);
        for (std::size_t c = 0; c < b.width; ++c) m(i, c) = v;
      } else {
        for (std::size_t c = 0; c < b.width; ++c) m(i, c) = bits(i, b.offset + c);
      }
    }
    ms.by_layer[b.layer] = std::move(m);
  }
  return ms;
}

void check_finite(std::span<const double> grads, const char* op) {
  for (double g : grads) {
    if (!std::isfinite(g)) throw NumericError(std::string(op) + ": non-finite gradient");
  }
}

// Allocation-free single-example forward + loss. The sampling loops below
// evaluate millions of mask realizations on small nets; going row by row
// with reused buffers is what keeps the toy studies inside their budgets.
// Loop order matches the batch matmul, so results are bit-identical to
// forward_eval on a one-row batch.
//
// Layers before the first gated layer cannot depend on the masks, so a
// caller evaluating several mask realizations of the same example primes
// the prefix once and completes each realization from there.
class RowLossEvaluator {
 public:
  RowLossEvaluator(const MlpModel& model, const GateLayout& layout, LossKind kind)
      : model_(&model),
        kind_(kind),
        block_of_layer_(model.depth(), nullptr),
        first_gated_(model.depth()) {
    std::size_t widest = 0;
    for (std::size_t k : model.layer_sizes) widest = std::max(widest, k);
    prefix_.resize(widest);
    cur_.resize(widest);
    next_.resize(widest);
    for (const auto& b : layout.blocks) {
      block_of_layer_[b.layer] = &b;
      first_gated_ = std::min(first_gated_, b.layer);
    }
  }

  // Runs the mask-independent layers [0, first_gated).
  void prime(std::span<const double> x_row) {
    const MlpModel& m = *model_;
    prefix_width_ = m.layer_sizes[0];
    for (std::size_t k = 0; k < prefix_width_; ++k) prefix_[k] = x_row[k];
    for (std::size_t j = 0; j < first_gated_; ++j) {
      layer_into(j, prefix_.data(), prefix_width_, next_.data());
      prefix_.swap(next_);
      prefix_width_ = m.layer_sizes[j + 1];
    }
  }

  // Completes one realization; `bits` is a flat gate row in layout order.
  double complete(std::span<const double> y_row, std::span<const double> bits) {
    const MlpModel& m = *model_;
    std::size_t width = prefix_width_;
    double* cur = cur_.data();
    for (std::size_t k = 0; k < width; ++k) cur[k] = prefix_[k];
    for (std::size_t j = first_gated_; j < m.depth(); ++j) {
      if (const auto* b = block_of_layer_[j]) {
        if (b->count == 1) {
          const double bit = bits[b->offset];
          for (std::size_t k = 0; k < width; ++k) cur[k] *= bit;
        } else {
          const double* bk = bits.data() + b->offset;
          for (std::size_t k = 0; k < width; ++k) cur[k] *= bk[k];
        }
      }
      layer_into(j, cur, width, next_.data());
      cur_.swap(next_);
      cur = cur_.data();
      width = m.layer_sizes[j + 1];
    }
    // Loss inline: this is the innermost loop of the sampling estimators.
    double loss = 0.0;
    switch (kind_) {
      case LossKind::squared_error:
        for (std::size_t j = 0; j < width; ++j) {
          const double d = y_row[j] - cur[j];
          loss += d * d;
        }
        break;
      case LossKind::softmax_cross_entropy:
      case LossKind::multinomial_log_lik: {
        double mx = cur[0];
        for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, cur[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < width; ++j) sum += std::exp(cur[j] - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < width; ++j) loss += y_row[j] * (lse - cur[j]);
        break;
      }
    }
    if (!std::isfinite(loss)) {
      throw NumericError("estimator: non-finite per-example loss");
    }
    return loss;
  }

  double operator()(std::span<const double> x_row, std::span<const double> y_row,
                    std::span<const double> bits) {
    prime(x_row);
    return complete(y_row, bits);
  }

 private:
  void layer_into(std::size_t j, const double* in, std::size_t width, double* out) {
    const MlpModel& m = *model_;
    const std::size_t out_w = m.layer_sizes[j + 1];
    const Matrix& w = m.weights[j];
    for (std::size_t c = 0; c < out_w; ++c) out[c] = 0.0;
    for (std::size_t k = 0; k < width; ++k) {
      const double v = in[k];
      const double* wrow = w.row(k).data();
      for (std::size_t c = 0; c < out_w; ++c) out[c] += v * wrow[c];
    }
    const double* bias = m.biases[j].data();
    for (std::size_t c = 0; c < out_w; ++c) out[c] += bias[c];
    switch (m.activations[j]) {
      case Activation::identity:
        return;
      case Activation::relu:
        for (std::size_t c = 0; c < out_w; ++c) out[c] = out[c] > 0.0 ? out[c] : 0.0;
        return;
      case Activation::sigmoid:
        for (std::size_t c = 0; c < out_w; ++c) out[c] = sigmoid(out[c]);
        return;
      case Activation::softmax: {
        double mx = out[0];
        for (std::size_t c = 1; c < out_w; ++c) mx = std::max(mx, out[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < out_w; ++c) {
          out[c] = std::exp(out[c] - mx);
          sum += out[c];
        }
        for (std::size_t c = 0; c < out_w; ++c) out[c] /= sum;
        return;
      }
    }
  }

  const MlpModel* model_;
  LossKind kind_;
  std::vector<const GateLayout::Block*> block_of_layer_;
  std::size_t first_gated_;
  std::vector<double> prefix_, cur_, next_;
  std::size_t prefix_width_ = 0;
};

GradEstimate finalize(std::vector<double> accum, double scale, int n_samples,
                      EstimatorKind kind, std::uint64_t seed, const char* op) {
  for (double& g : accum) g *= scale / static_cast<double>(n_samples);
  check_finite(accum, op);
  GradEstimate e;
  e.grads = std::move(accum);
  e.estimator = kind;
  e.n_samples = n_samples;
  e.seed = seed;
  return e;
}

// Shared ARM loop: per example, draw (or read) u, build the antithetic
// pair, and evaluate the loss difference only where the masks disagree;
// agreeing examples contribute exactly zero and are skipped.
GradEstimate arm_run(const MlpModel& model, const Matrix& inputs,
                     const Matrix& targets, LossKind kind, double scale,
                     int n_samples, Rng* rng, const Matrix* fixed_u,
                     std::uint64_t seed) {
  require_gate_kind(model, GateKind::bernoulli, "arm_gradient");
  check_batch(inputs, targets, "arm_gradient");
  if (n_samples < 1) throw ConfigError("arm_gradient: n_samples must be >= 1");
  model.validate();
  const GateLayout layout = gate_layout(model);
  if (fixed_u &&
      (fixed_u->rows() != inputs.rows() || fixed_u->cols() != layout.total)) {
    throw DimensionError("arm_gradient: uniform draw shape mismatch");
  }
  const std::vector<double> logits = gate_logits(model);
  const std::size_t dim = layout.total;
  std::vector<double> p_lo(dim), p_hi(dim);
  for (std::size_t k = 0; k < dim; ++k) {
    p_lo[k] = sigmoid(-logits[k]);
    p_hi[k] = sigmoid(logits[k]);
  }
  RowLossEvaluator eval(model, layout, kind);
  const std::size_t batch = inputs.rows();

  // With few gate bits each example has at most 2^dim distinct losses;
  // repeated samples in one call hit a lazy per-(row, config) table
  // instead of re-running the forward pass. Values are identical either
  // way, so the estimate does not depend on the path taken.
  const bool memoize = dim <= 8 && n_samples > 1;
  std::vector<double> memo;
  std::vector<unsigned char> have;
  if (memoize) {
    memo.assign(batch << dim, 0.0);
    have.assign(batch << dim, 0);
  }

  std::vector<double> u(dim), pseudo(dim), truth(dim), accum(dim, 0.0);
  for (int n = 0; n < n_samples; ++n) {
    for (std::size_t i = 0; i < batch; ++i) {
      bool disagree = false;
      std::size_t cfg_p = 0, cfg_t = 0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double uk = fixed_u ? (*fixed_u)(i, k) : rng->uniform();
        u[k] = uk;
        const bool pb = uk > p_lo[k];
        const bool tb = uk < p_hi[k];
        pseudo[k] = pb ? 1.0 : 0.0;
        truth[k] = tb ? 1.0 : 0.0;
        cfg_p |= static_cast<std::size_t>(pb) << k;
        cfg_t |= static_cast<std::size_t>(tb) << k;
        disagree |= pb != tb;
      }
      if (!disagree) continue;
      double diff;
      if (memoize) {
        const std::size_t ip = (i << dim) | cfg_p;
        const std::size_t it = (i << dim) | cfg_t;
        if (!have[ip]) {
          memo[ip] = eval(inputs.row(i), targets.row(i), pseudo);
          have[ip] = 1;
        }
        if (!have[it]) {
          memo[it] = eval(inputs.row(i), targets.row(i), truth);
          have[it] = 1;
        }
        diff = memo[ip] - memo[it];
      } else {
        eval.prime(inputs.row(i));
        diff = eval.complete(targets.row(i), pseudo) -
               eval.complete(targets.row(i), truth);
      }
      if (diff == 0.0) continue;
      for (std::size_t k = 0; k < dim; ++k) accum[k] += diff * (u[k] - 0.5);
    }
  }
  return finalize(std::move(accum), scale, n_samples, EstimatorKind::arm, seed,
                  "arm_gradient");
}

}  // namespace

GradEstimate arm_gradient(const MlpModel& model, const Matrix& inputs,
                          const Matrix& targets, LossKind kind, double scale,
                          Rng& rng, int n_samples) {
  return arm_run(model, inputs, targets, kind, scale, n_samples, &rng, nullptr,
                 rng.seed());
}

GradEstimate arm_gradient_with_uniforms(const MlpModel& model, const Matrix& inputs,
                                        const Matrix& targets, LossKind kind,
                                        double scale, const Matrix& u) {
  return arm_run(model, inputs, targets, kind, scale, 1, nullptr, &u, 0);
}

GradEstimate reinforce_gradient(const MlpModel& model, const Matrix& inputs,
                                const Matrix& targets, LossKind kind, double scale,
                                Rng& rng, int n_samples) {
  require_gate_kind(model, GateKind::bernoulli, "reinforce_gradient");
  check_batch(inputs, targets, "reinforce_gradient");
  if (n_samples < 1) throw ConfigError("reinforce_gradient: n_samples must be >= 1");
  model.validate();
  const GateLayout layout = gate_layout(model);
  const std::vector<double> logits = gate_logits(model);
  std::vector<double> p(layout.total);
  for (std::size_t k = 0; k < layout.total; ++k) p[k] = sigmoid(logits[k]);
  RowLossEvaluator eval(model, layout, kind);
  const std::size_t batch = inputs.rows();
  std::vector<double> z(layout.total), accum(layout.total, 0.0);
  for (int n = 0; n < n_samples; ++n) {
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t k = 0; k < layout.total; ++k) {
        z[k] = rng.bernoulli(p[k]) ? 1.0 : 0.0;
      }
      const double loss = eval(inputs.row(i), targets.row(i), z);
      for (std::size_t k = 0; k < layout.total; ++k) {
        accum[k] += loss * (z[k] - p[k]);
      }
    }
  }
  return finalize(std::move(accum), scale, n_samples, EstimatorKind::reinforce,
                  rng.seed(), "reinforce_gradient");
}

namespace {

GradEstimate relaxed_pathwise_gradient(const MlpModel& model, const Matrix& inputs,
                                       const Matrix& targets, LossKind kind,
                                       double scale, Rng& rng, int n_samples,
                                       GateKind gate_kind, EstimatorKind est_kind,
                                       const char* op) {
  require_gate_kind(model, gate_kind, op);
  check_batch(inputs, targets, op);
  if (n_samples < 1) throw ConfigError(std::string(op) + ": n_samples must be >= 1");
  const GateLayout layout = gate_layout(model);
  const std::size_t batch = inputs.rows();
  std::vector<double> accum(layout.total, 0.0);
  BackwardOptions opts;
  opts.want_mask_grads = true;
  for (int n = 0; n < n_samples; ++n) {
    MaskSet masks;
    masks.by_layer.resize(model.depth());
    std::vector<Matrix> dmask(model.depth());
    for (const auto& b : layout.blocks) {
      RelaxedMaskSample s =
          gate_kind == GateKind::concrete
              ? sample_concrete_masks(model.gates[b.layer], batch, b.width, rng)
              : sample_gaussian_masks(model.gates[b.layer], batch, b.width, rng);
      masks.by_layer[b.layer] = std::move(s.mask);
      dmask[b.layer] = std::move(s.dmask_dlogit);
    }
    ForwardResult fwd = forward_pass(model, inputs, masks);
    const Matrix og = loss_output_grad(fwd.outputs, targets, kind);
    BackwardResult back = backward_from_output_grad(model, fwd.cache, og, opts);
    // backward_from_output_grad differentiates the batch-mean loss; the
    // estimator contract is over the per-example sum, hence the factor B.
    const double to_sum = static_cast<double>(batch);
    for (const auto& b : layout.blocks) {
      const Matrix& mg = back.mask_grads[b.layer];
      const Matrix& dm = dmask[b.layer];
      for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t c = 0; c < b.width; ++c) {
          const std::size_t k = b.count == 1 ? b.offset : b.offset + c;
          accum[k] += to_sum * mg(i, c) * dm(i, c);
        }
      }
    }
  }
  return finalize(std::move(accum), scale, n_samples, est_kind, rng.seed(), op);
}

}  // namespace

GradEstimate concrete_gradient(const MlpModel& model, const Matrix& inputs,
                               const Matrix& targets, LossKind kind, double scale,
                               Rng& rng, int n_samples) {
  return relaxed_pathwise_gradient(model, inputs, targets, kind, scale, rng,
                                   n_samples, GateKind::concrete,
                                   EstimatorKind::concrete_pathwise,
                                   "concrete_gradient");
}

GradEstimate gaussian_gradient(const MlpModel& model, const Matrix& inputs,
                               const Matrix& targets, LossKind kind, double scale,
                               Rng& rng, int n_samples) {
  return relaxed_pathwise_gradient(model, inputs, targets, kind, scale, rng,
                                   n_samples, GateKind::gaussian,
                                   EstimatorKind::gaussian_pathwise,
                                   "gaussian_gradient");
}

GradEstimate exact_gate_gradient(const MlpModel& model, const Matrix& inputs,
                                 const Matrix& targets, LossKind kind, double scale) {
  require_gate_kind(model, GateKind::bernoulli, "exact_gate_gradient");
  check_batch(inputs, targets, "exact_gate_gradient");
  const GateLayout layout = gate_layout(model);
  if (layout.total > kEnumerationCap) {
    char buf[128];
    std::snprintf(buf, sizeof(buf),
                  "exact_gate_gradient: %zu gate bits exceed the enumeration cap of %zu",
                  layout.total, kEnumerationCap);
    throw UnsupportedError(buf);
  }
  const std::vector<double> logits = gate_logits(model);
  std::vector<double> p(layout.total);
  for (std::size_t k = 0; k < layout.total; ++k) p[k] = sigmoid(logits[k]);

  model.validate();
  const std::size_t batch = inputs.rows();
  RowLossEvaluator eval(model, layout, kind);
  std::vector<double> bits(layout.total);
  const std::size_t n_configs = std::size_t{1} << layout.total;
  std::vector<double> losses(n_configs);
  std::vector<double> probs(n_configs);
  for (std::size_t cfg = 0; cfg < n_configs; ++cfg) {
    double prob = 1.0;
    for (std::size_t k = 0; k < layout.total; ++k) {
      const bool bit = (cfg >> k) & 1u;
      prob *= bit ? p[k] : 1.0 - p[k];
      bits[k] = bit ? 1.0 : 0.0;
    }
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      total += eval(inputs.row(i), targets.row(i), bits);
    }
    losses[cfg] = total;
    probs[cfg] = prob;
  }
  // d/da E[L] = sigma'(a) (E[L | z=1] - E[L | z=0]). Pairing configurations
  // that differ only in bit k lets the loss difference cancel before any
  // weight touches it; a mask-independent loss gives exactly zero.
  std::vector<double> grads(layout.total);
  for (std::size_t k = 0; k < layout.total; ++k) {
    const std::size_t bit = std::size_t{1} << k;
    double acc = 0.0;
    for (std::size_t cfg = 0; cfg < n_configs; ++cfg) {
      if (cfg & bit) continue;
      // probs[cfg] carries the (1 - p_k) factor; dividing it out and
      // multiplying by sigma'(a_k) = p_k (1 - p_k) leaves p_k * rest.
      acc += probs[cfg] / (1.0 - p[k]) * (losses[cfg | bit] - losses[cfg]);
    }
    grads[k] = scale * p[k] * (1.0 - p[k]) * acc;
  }
  check_finite(grads, "exact_gate_gradient");
  GradEstimate e;
  e.grads = std::move(grads);
  e.estimator = EstimatorKind::exact;
  e.n_samples = static_cast<int>(n_configs);
  e.seed = 0;
  return e;
}

GradEstimate arm_gradient_fn(std::span<const double> logits, std::size_t batch,
                             const MaskLossFn& loss, double scale, Rng& rng,
                             int n_samples) {
  if (logits.empty()) throw ConfigError("arm_gradient_fn: no logits");
  if (n_samples < 1) throw ConfigError("arm_gradient_fn: n_samples must be >= 1");
  const std::size_t dim = logits.size();
  std::vector<double> p_lo(dim), p_hi(dim);
  for (std::size_t k = 0; k < dim; ++k) {
    p_lo[k] = sigmoid(-logits[k]);
    p_hi[k] = sigmoid(logits[k]);
  }
  std::vector<double> u(dim), pseudo(dim), truth(dim), accum(dim, 0.0);
  for (int n = 0; n < n_samples; ++n) {
    for (std::size_t i = 0; i < batch; ++i) {
      bool disagree = false;
      for (std::size_t k = 0; k < dim; ++k) {
        u[k] = rng.uniform();
        pseudo[k] = u[k] > p_lo[k] ? 1.0 : 0.0;
        truth[k] = u[k] < p_hi[k] ? 1.0 : 0.0;
        disagree |= pseudo[k] != truth[k];
      }
      if (!disagree) continue;
      const double diff = loss(i, pseudo) - loss(i, truth);
      for (std::size_t k = 0; k < dim; ++k) accum[k] += diff * (u[k] - 0.5);
    }
  }
  return finalize(std::move(accum), scale, n_samples, EstimatorKind::arm, rng.seed(),
                  "arm_gradient_fn");
}

EstimatorDiagnostics estimator_diagnostics(std::span<const GradEstimate> samples,
                                           const GradEstimate& exact) {
  if (samples.size() < 2) {
    throw ConfigError("estimator_diagnostics: need at least two samples");
  }
  const std::size_t dim = exact.grads.size();
  for (const GradEstimate& s : samples) {
    if (s.grads.size() != dim) {
      throw DimensionError("estimator_diagnostics: sample dimension mismatch");
    }
  }
  const double n = static_cast<double>(samples.size());
  EstimatorDiagnostics d;
  d.n = samples.size();
  d.bias.resize(dim);
  d.stddev.resize(dim);
  d.mse.resize(dim);
  for (std::size_t k = 0; k < dim; ++k) {
    double mean = 0.0;
    for (const GradEstimate& s : samples) mean += s.grads[k];
    mean /= n;
    double ss = 0.0;
    double se = 0.0;
    for (const GradEstimate& s : samples) {
      const double dm = s.grads[k] - mean;
      const double de = s.grads[k] - exact.grads[k];
      ss += dm * dm;
      se += de * de;
    }
    d.bias[k] = mean - exact.grads[k];
    d.stddev[k] = std::sqrt(ss / (n - 1.0));
    d.mse[k] = se / n;
  }
  return d;
}

}  // namespace lbd
