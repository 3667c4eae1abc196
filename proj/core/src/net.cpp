#include "lbd/net.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include "lbd/error.hpp"

namespace lbd {

namespace {

[[noreturn]] void layer_error(const char* what, std::size_t layer) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%s at layer %zu", what, layer);
  throw DimensionError(buf);
}

[[noreturn]] void numeric_layer_error(const char* what, std::size_t layer) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%s at layer %zu", what, layer);
  throw NumericError(buf);
}

void stable_softmax_row(std::span<const double> in, std::span<double> out) {
  double mx = in[0];
  for (double v : in) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t j = 0; j < in.size(); ++j) {
    out[j] = std::exp(in[j] - mx);
    sum += out[j];
  }
  for (double& v : out) v /= sum;
}

double log_sum_exp_row(std::span<const double> in) {
  double mx = in[0];
  for (double v : in) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : in) sum += std::exp(v - mx);
  return mx + std::log(sum);
}

void apply_activation(Activation act, const Matrix& pre, Matrix& post) {
  switch (act) {
    case Activation::identity:
      post = pre;
      return;
    case Activation::relu:
      post = pre;
      for (double& v : post.flat()) v = v > 0.0 ? v : 0.0;
      return;
    case Activation::sigmoid:
      post = pre;
      for (double& v : post.flat()) v = sigmoid(v);
      return;
    case Activation::softmax:
      post = Matrix(pre.rows(), pre.cols());
      for (std::size_t i = 0; i < pre.rows(); ++i) {
        stable_softmax_row(pre.row(i), post.row(i));
      }
      return;
  }
  throw ConfigError("unknown activation");
}

}  // namespace

void MlpModel::validate() const {
  const std::size_t depth_l = weights.size();
  if (layer_sizes.size() != depth_l + 1) {
    throw DimensionError("model: layer_sizes must have one more entry than weights");
  }
  if (biases.size() != depth_l || activations.size() != depth_l ||
      gates.size() != depth_l) {
    throw DimensionError("model: per-layer vectors must all have depth entries");
  }
  for (std::size_t j = 0; j < depth_l; ++j) {
    if (layer_sizes[j] == 0 || layer_sizes[j + 1] == 0) layer_error("model: empty layer", j);
    if (weights[j].rows() != layer_sizes[j] || weights[j].cols() != layer_sizes[j + 1]) {
      layer_error("model: weight shape mismatch", j);
    }
    if (biases[j].size() != layer_sizes[j + 1]) layer_error("model: bias size mismatch", j);
    const GateSpec& g = gates[j];
    if (g.gated()) {
      const bool ok = g.granularity == GateGranularity::per_layer
                          ? g.logits.size() == 1
                          : g.logits.size() == layer_sizes[j];
      if (!ok) layer_error("model: gate logit dimension mismatch", j);
      for (double a : g.logits) {
        if (!std::isfinite(a)) layer_error("model: non-finite gate logit", j);
      }
    }
  }
}

MlpModel make_mlp(std::vector<std::size_t> layer_sizes,
                  std::vector<Activation> activations) {
  MlpModel m;
  m.layer_sizes = std::move(layer_sizes);
  if (m.layer_sizes.size() < 2) throw DimensionError("make_mlp: need at least two layers");
  const std::size_t depth_l = m.layer_sizes.size() - 1;
  if (activations.size() != depth_l) {
    throw DimensionError("make_mlp: one activation per weight layer");
  }
  m.activations = std::move(activations);
  m.weights.reserve(depth_l);
  m.biases.reserve(depth_l);
  m.gates.resize(depth_l);
  for (std::size_t j = 0; j < depth_l; ++j) {
    m.weights.emplace_back(m.layer_sizes[j], m.layer_sizes[j + 1]);
    m.biases.emplace_back(m.layer_sizes[j + 1], 0.0);
  }
  return m;
}

void init_weights(MlpModel& model, Rng& rng) {
  for (std::size_t j = 0; j < model.depth(); ++j) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(model.layer_sizes[j]));
    for (double& w : model.weights[j].flat()) w = scale * rng.normal();
    for (double& b : model.biases[j]) b = 0.0;
  }
}

void attach_gate(MlpModel& model, std::size_t layer, GateKind kind,
                 GateGranularity granularity, double init_logit) {
  if (layer >= model.depth()) layer_error("attach_gate: no such layer", layer);
  GateSpec g;
  g.kind = kind;
  g.granularity = granularity;
  const std::size_t dim =
      granularity == GateGranularity::per_layer ? 1 : model.layer_sizes[layer];
  g.logits.assign(dim, init_logit);
  clamp_logits(g);
  model.gates[layer] = std::move(g);
}

MaskSet sample_masks(const MlpModel& model, std::size_t batch, Rng& rng) {
  MaskSet masks;
  masks.by_layer.resize(model.depth());
  for (std::size_t j = 0; j < model.depth(); ++j) {
    const GateSpec& g = model.gates[j];
    if (!g.gated()) continue;
    const std::size_t width = model.layer_sizes[j];
    switch (g.kind) {
      case GateKind::bernoulli:
        masks.by_layer[j] = sample_bernoulli_masks(g, batch, width, rng);
        break;
      case GateKind::concrete:
        masks.by_layer[j] = sample_concrete_masks(g, batch, width, rng).mask;
        break;
      case GateKind::gaussian:
        masks.by_layer[j] = sample_gaussian_masks(g, batch, width, rng).mask;
        break;
      case GateKind::none:
        break;
    }
  }
  return masks;
}

MaskSet ones_masks(const MlpModel& model, std::size_t batch) {
  MaskSet masks;
  masks.by_layer.resize(model.depth());
  for (std::size_t j = 0; j < model.depth(); ++j) {
    if (model.gates[j].gated()) {
      masks.by_layer[j] = Matrix(batch, model.layer_sizes[j], 1.0);
    }
  }
  return masks;
}

MaskSet expected_masks(const MlpModel& model, std::size_t batch) {
  MaskSet masks;
  masks.by_layer.resize(model.depth());
  for (std::size_t j = 0; j < model.depth(); ++j) {
    const GateSpec& g = model.gates[j];
    if (!g.gated()) continue;
    const std::size_t width = model.layer_sizes[j];
    Matrix m(batch, width, 1.0);
    if (g.kind == GateKind::bernoulli || g.kind == GateKind::concrete) {
      for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t k = 0; k < width; ++k) {
          const double a =
              g.granularity == GateGranularity::per_layer ? g.logits[0] : g.logits[k];
          m(i, k) = sigmoid(a);
        }
      }
    }
    masks.by_layer[j] = std::move(m);
  }
  return masks;
}

std::uint64_t model_fingerprint(const MlpModel& model) {
  // FNV-1a over structure and parameter bytes. Gate logits are excluded:
  // they do not enter the forward map once masks are drawn.
  std::uint64_t h = 1469598103934665603ULL;
  auto mix_bytes = [&h](const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t k : model.layer_sizes) mix_bytes(&k, sizeof(k));
  for (std::size_t j = 0; j < model.depth(); ++j) {
    const auto wf = model.weights[j].flat();
    mix_bytes(wf.data(), wf.size() * sizeof(double));
    mix_bytes(model.biases[j].data(), model.biases[j].size() * sizeof(double));
    const int act = static_cast<int>(model.activations[j]);
    const int gated = model.gates[j].gated() ? 1 : 0;
    mix_bytes(&act, sizeof(act));
    mix_bytes(&gated, sizeof(gated));
  }
  return h;
}

namespace {

void check_forward_inputs(const MlpModel& model, const Matrix& inputs,
                          const MaskSet& masks) {
  model.validate();
  if (inputs.cols() != model.input_dim()) {
    layer_error("forward: input width mismatch", 0);
  }
  for (std::size_t j = 0; j < model.depth(); ++j) {
    const bool gated = model.gates[j].gated();
    const bool provided = masks.has(j);
    if (gated && !provided) layer_error("forward: missing mask for gated layer", j);
    if (!gated && provided) layer_error("forward: mask supplied for ungated layer", j);
    if (gated) {
      const Matrix& m = masks.by_layer[j];
      if (m.rows() != inputs.rows() || m.cols() != model.layer_sizes[j]) {
        layer_error("forward: mask shape mismatch", j);
      }
    }
  }
}

Matrix layer_forward(const MlpModel& model, std::size_t j, const Matrix& in_masked) {
  Matrix pre = matmul(in_masked, model.weights[j]);
  const auto& b = model.biases[j];
  for (std::size_t i = 0; i < pre.rows(); ++i) {
    const auto prow = pre.row(i);
    for (std::size_t c = 0; c < prow.size(); ++c) prow[c] += b[c];
  }
  return pre;
}

}  // namespace

ForwardResult forward_pass(const MlpModel& model, const Matrix& inputs,
                           const MaskSet& masks) {
  check_forward_inputs(model, inputs, masks);
  ForwardResult r;
  ActivationCache& cache = r.cache;
  cache.batch = inputs.rows();
  cache.masks = masks;
  cache.masks.by_layer.resize(model.depth());
  cache.acts.reserve(model.depth() + 1);
  cache.pres.reserve(model.depth());
  cache.masked.resize(model.depth());
  cache.acts.push_back(inputs);
  for (std::size_t j = 0; j < model.depth(); ++j) {
    const Matrix* fed = &cache.acts.back();
    if (model.gates[j].gated()) {
      cache.masked[j] = hadamard(*fed, masks.by_layer[j]);
      fed = &cache.masked[j];
    }
    Matrix pre = layer_forward(model, j, *fed);
    Matrix post;
    apply_activation(model.activations[j], pre, post);
    if (!post.all_finite()) {
      numeric_layer_error("forward: non-finite activation", j);
    }
    cache.pres.push_back(std::move(pre));
    cache.acts.push_back(std::move(post));
  }
  cache.fingerprint = model_fingerprint(model);
  r.outputs = cache.acts.back();
  return r;
}

Matrix forward_eval(const MlpModel& model, const Matrix& inputs,
                    const MaskSet& masks) {
  check_forward_inputs(model, inputs, masks);
  Matrix cur = inputs;
  for (std::size_t j = 0; j < model.depth(); ++j) {
    if (model.gates[j].gated()) cur = hadamard(cur, masks.by_layer[j]);
    Matrix pre = layer_forward(model, j, cur);
    apply_activation(model.activations[j], pre, cur);
  }
  if (!cur.all_finite()) throw NumericError("forward_eval: non-finite output");
  return cur;
}

namespace {

void check_loss_shapes(const Matrix& outputs, const Matrix& targets, LossKind kind) {
  if (!outputs.same_shape(targets)) {
    throw DimensionError("loss: outputs and targets differ in shape");
  }
  if (!outputs.all_finite()) throw NumericError("loss: non-finite network output");
  if (kind == LossKind::multinomial_log_lik) {
    for (double v : targets.flat()) {
      if (v < 0.0) throw ConfigError("loss: multinomial targets must be nonnegative");
    }
  }
}

}  // namespace

double example_loss(std::span<const double> output_row,
                    std::span<const double> target_row, LossKind kind) {
  double acc = 0.0;
  switch (kind) {
    case LossKind::squared_error:
      for (std::size_t j = 0; j < output_row.size(); ++j) {
        const double d = target_row[j] - output_row[j];
        acc += d * d;
      }
      return acc;
    case LossKind::softmax_cross_entropy:
    case LossKind::multinomial_log_lik: {
      const double lse = log_sum_exp_row(output_row);
      for (std::size_t j = 0; j < output_row.size(); ++j) {
        acc += target_row[j] * (lse - output_row[j]);
      }
      return acc;
    }
  }
  throw ConfigError("unknown loss kind");
}

std::vector<double> per_example_loss(const Matrix& outputs, const Matrix& targets,
                                     LossKind kind) {
  check_loss_shapes(outputs, targets, kind);
  const std::size_t n = outputs.rows();
  std::vector<double> loss(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    loss[i] = example_loss(outputs.row(i), targets.row(i), kind);
  }
  return loss;
}

double empirical_loss(const Matrix& outputs, const Matrix& targets, LossKind kind) {
  const std::vector<double> per = per_example_loss(outputs, targets, kind);
  double sum = 0.0;
  for (double v : per) sum += v;
  return sum / static_cast<double>(per.size());
}

Matrix loss_output_grad(const Matrix& outputs, const Matrix& targets, LossKind kind) {
  check_loss_shapes(outputs, targets, kind);
  const double inv_b = 1.0 / static_cast<double>(outputs.rows());
  Matrix g(outputs.rows(), outputs.cols());
  switch (kind) {
    case LossKind::squared_error:
      for (std::size_t i = 0; i < outputs.rows(); ++i) {
        for (std::size_t j = 0; j < outputs.cols(); ++j) {
          g(i, j) = 2.0 * (outputs(i, j) - targets(i, j)) * inv_b;
        }
      }
      break;
    case LossKind::softmax_cross_entropy:
      for (std::size_t i = 0; i < outputs.rows(); ++i) {
        stable_softmax_row(outputs.row(i), g.row(i));
        for (std::size_t j = 0; j < outputs.cols(); ++j) {
          g(i, j) = (g(i, j) - targets(i, j)) * inv_b;
        }
      }
      break;
    case LossKind::multinomial_log_lik:
      for (std::size_t i = 0; i < outputs.rows(); ++i) {
        stable_softmax_row(outputs.row(i), g.row(i));
        double total = 0.0;
        for (std::size_t j = 0; j < outputs.cols(); ++j) total += targets(i, j);
        for (std::size_t j = 0; j < outputs.cols(); ++j) {
          g(i, j) = (total * g(i, j) - targets(i, j)) * inv_b;
        }
      }
      break;
  }
  return g;
}

NetGradients zero_gradients(const MlpModel& model) {
  NetGradients g;
  g.weights.reserve(model.depth());
  g.biases.reserve(model.depth());
  for (std::size_t j = 0; j < model.depth(); ++j) {
    g.weights.emplace_back(model.weights[j].rows(), model.weights[j].cols());
    g.biases.emplace_back(model.biases[j].size(), 0.0);
  }
  return g;
}

void accumulate(NetGradients& acc, const NetGradients& g, double scale) {
  for (std::size_t j = 0; j < acc.weights.size(); ++j) {
    auto af = acc.weights[j].flat();
    const auto gf = g.weights[j].flat();
    for (std::size_t i = 0; i < af.size(); ++i) af[i] += scale * gf[i];
    for (std::size_t i = 0; i < acc.biases[j].size(); ++i) {
      acc.biases[j][i] += scale * g.biases[j][i];
    }
  }
}

BackwardResult backward_from_output_grad(const MlpModel& model,
                                         const ActivationCache& cache,
                                         const Matrix& output_grad,
                                         const BackwardOptions& opts) {
  model.validate();
  if (cache.fingerprint != model_fingerprint(model)) {
    throw ConsistencyError("backward: model changed since the cached forward pass");
  }
  if (output_grad.rows() != cache.batch || output_grad.cols() != model.output_dim()) {
    throw DimensionError("backward: output gradient shape mismatch");
  }

  BackwardResult result;
  result.grads = zero_gradients(model);
  if (opts.want_mask_grads) result.mask_grads.resize(model.depth());

  Matrix g = output_grad;  // d loss / d post-activation of the current layer
  for (std::size_t jr = model.depth(); jr-- > 0;) {
    const Matrix& pre = cache.pres[jr];
    const Matrix& post = cache.acts[jr + 1];
    Matrix dpre(g.rows(), g.cols());
    switch (model.activations[jr]) {
      case Activation::identity:
        dpre = g;
        break;
      case Activation::relu:
        for (std::size_t i = 0; i < g.size(); ++i) {
          dpre.flat()[i] = pre.flat()[i] > 0.0 ? g.flat()[i] : 0.0;
        }
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = post.flat()[i];
          dpre.flat()[i] = g.flat()[i] * s * (1.0 - s);
        }
        break;
      case Activation::softmax:
        for (std::size_t i = 0; i < g.rows(); ++i) {
          const auto prow = post.row(i);
          const auto grow = g.row(i);
          double dot = 0.0;
          for (std::size_t c = 0; c < prow.size(); ++c) dot += grow[c] * prow[c];
          const auto drow = dpre.row(i);
          for (std::size_t c = 0; c < prow.size(); ++c) {
            drow[c] = prow[c] * (grow[c] - dot);
          }
        }
        break;
    }

    const bool gated = model.gates[jr].gated();
    const Matrix& fed = gated ? cache.masked[jr] : cache.acts[jr];
    result.grads.weights[jr] = matmul_at_b(fed, dpre);
    auto& db = result.grads.biases[jr];
    for (std::size_t i = 0; i < dpre.rows(); ++i) {
      const auto drow = dpre.row(i);
      for (std::size_t c = 0; c < drow.size(); ++c) db[c] += drow[c];
    }

    const bool need_below = jr > 0 || opts.want_input_grad || (gated && opts.want_mask_grads);
    if (!need_below) break;

    Matrix dfed = matmul_a_bt(dpre, model.weights[jr]);  // d loss / d masked input
    if (gated) {
      if (opts.want_mask_grads) {
        result.mask_grads[jr] = hadamard(dfed, cache.acts[jr]);
      }
      dfed = hadamard(dfed, cache.masks.by_layer[jr]);
    }
    if (jr == 0) {
      if (opts.want_input_grad) result.input_grad = std::move(dfed);
      break;
    }
    g = std::move(dfed);
  }
  return result;
}

NetGradients backward_pass(const MlpModel& model, const ActivationCache& cache,
                           const Matrix& targets, LossKind kind) {
  const Matrix& outputs = cache.acts.back();
  Matrix og = loss_output_grad(outputs, targets, kind);
  return backward_from_output_grad(model, cache, og).grads;
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

const char* loss_name(LossKind k) {
  switch (k) {
    case LossKind::squared_error: return "squared-error";
    case LossKind::softmax_cross_entropy: return "softmax-cross-entropy";
    case LossKind::multinomial_log_lik: return "multinomial-log-lik";
  }
  return "?";
}

}  // namespace lbd
