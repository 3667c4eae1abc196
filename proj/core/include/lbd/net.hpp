#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lbd/gates.hpp"
#include "lbd/matrix.hpp"

namespace lbd {

enum class Activation { identity, relu, sigmoid, softmax };
enum class LossKind { squared_error, softmax_cross_entropy, multinomial_log_lik };

// Dense feed-forward network. weights[j] maps layer_sizes[j] to
// layer_sizes[j+1]; gates[j] multiplies the input of layer j (the previous
// layer's output, or the data itself for j = 0). Biases are never masked.
struct MlpModel {
  std::vector<std::size_t> layer_sizes;       // K_0 .. K_L
  std::vector<Matrix> weights;                // L entries, K_j x K_{j+1}
  std::vector<std::vector<double>> biases;    // L entries, length K_{j+1}
  std::vector<Activation> activations;        // L entries
  std::vector<GateSpec> gates;                // L entries; kind none = ungated

  std::size_t depth() const { return weights.size(); }
  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t output_dim() const { return layer_sizes.back(); }
  void validate() const;
};

MlpModel make_mlp(std::vector<std::size_t> layer_sizes,
                  std::vector<Activation> activations);
// Standard-normal entries scaled by 1/sqrt(fan-in); biases zero.
void init_weights(MlpModel& model, Rng& rng);
void attach_gate(MlpModel& model, std::size_t layer, GateKind kind,
                 GateGranularity granularity, double init_logit);

// One realization of the multiplicative masks for all gated layers of one
// pass: by_layer[j] is batch x layer_sizes[j] for gated j, empty otherwise.
struct MaskSet {
  std::vector<Matrix> by_layer;

  bool has(std::size_t layer) const {
    return layer < by_layer.size() && !by_layer[layer].empty();
  }
};

MaskSet sample_masks(const MlpModel& model, std::size_t batch, Rng& rng);
MaskSet ones_masks(const MlpModel& model, std::size_t batch);
// Mask fixed at the gate's mean: sigmoid(logit) for bernoulli/concrete,
// 1 for gaussian. Used for deterministic evaluation passes.
MaskSet expected_masks(const MlpModel& model, std::size_t batch);

struct ActivationCache {
  std::vector<Matrix> acts;    // L+1 entries; acts[0] = inputs
  std::vector<Matrix> pres;    // L entries, pre-activation
  std::vector<Matrix> masked;  // L entries; empty when layer is ungated
  MaskSet masks;
  std::uint64_t fingerprint = 0;
  std::size_t batch = 0;
};

std::uint64_t model_fingerprint(const MlpModel& model);

struct ForwardResult {
  Matrix outputs;
  ActivationCache cache;
};
ForwardResult forward_pass(const MlpModel& model, const Matrix& inputs,
                           const MaskSet& masks);
// Outputs only; skips the cache when no backward pass will follow.
Matrix forward_eval(const MlpModel& model, const Matrix& inputs,
                    const MaskSet& masks);

double empirical_loss(const Matrix& outputs, const Matrix& targets, LossKind kind);
std::vector<double> per_example_loss(const Matrix& outputs, const Matrix& targets,
                                     LossKind kind);
double example_loss(std::span<const double> output_row,
                    std::span<const double> target_row, LossKind kind);
// d(mean loss)/d(outputs).
Matrix loss_output_grad(const Matrix& outputs, const Matrix& targets, LossKind kind);

struct NetGradients {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;
};
NetGradients zero_gradients(const MlpModel& model);
void accumulate(NetGradients& acc, const NetGradients& g, double scale = 1.0);

struct BackwardOptions {
  bool want_input_grad = false;
  bool want_mask_grads = false;
};
struct BackwardResult {
  NetGradients grads;
  Matrix input_grad;               // batch x K_0 when requested
  std::vector<Matrix> mask_grads;  // per layer, gated layers only
};

// Backpropagation from an arbitrary d loss / d output seed. Masks are
// treated as constants; gate logits are not differentiated here.
BackwardResult backward_from_output_grad(const MlpModel& model,
                                         const ActivationCache& cache,
                                         const Matrix& output_grad,
                                         const BackwardOptions& opts = {});
NetGradients backward_pass(const MlpModel& model, const ActivationCache& cache,
                           const Matrix& targets, LossKind kind);

const char* activation_name(Activation a);
const char* loss_name(LossKind k);

}  // namespace lbd
