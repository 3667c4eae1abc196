#include <benchmark/benchmark.h>

#include "lbd/estimators.hpp"
#include "lbd/experiments.hpp"
#include "lbd/net.hpp"

namespace {

lbd::ToyStudy toy() {
  lbd::RunConfig cfg = lbd::default_config(lbd::Experiment::toy_grid);
  cfg.seed = 1;
  return lbd::make_toy_study(cfg);
}

void BM_ToyForward(benchmark::State& state) {
  const lbd::ToyStudy study = toy();
  const lbd::MaskSet masks = lbd::ones_masks(study.model, study.x.rows());
  for (auto _ : state) {
    benchmark::DoNotOptimize(lbd::forward_eval(study.model, study.x, masks));
  }
}
BENCHMARK(BM_ToyForward);

void BM_ArmGradientSample(benchmark::State& state) {
  const lbd::ToyStudy study = toy();
  lbd::Rng rng(2);
  const double scale = 1.0 / static_cast<double>(study.x.rows());
  for (auto _ : state) {
    benchmark::DoNotOptimize(lbd::arm_gradient(study.model, study.x, study.y,
                                               lbd::LossKind::squared_error, scale,
                                               rng, 1));
  }
}
BENCHMARK(BM_ArmGradientSample);

void BM_ExactEnumeration(benchmark::State& state) {
  lbd::Rng rng(3);
  const std::size_t bits = static_cast<std::size_t>(state.range(0));
  lbd::MlpModel model =
      lbd::make_mlp({bits, 4, 2}, {lbd::Activation::relu, lbd::Activation::identity});
  lbd::init_weights(model, rng);
  lbd::attach_gate(model, 0, lbd::GateKind::bernoulli,
                   lbd::GateGranularity::per_neuron, 0.0);
  lbd::Matrix x(16, bits);
  for (double& v : x.flat()) v = rng.normal();
  lbd::Matrix y(16, 2);
  for (std::size_t i = 0; i < 16; ++i) y(i, i % 2) = 1.0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(lbd::exact_gate_gradient(
        model, x, y, lbd::LossKind::softmax_cross_entropy, 1.0));
  }
}
BENCHMARK(BM_ExactEnumeration)->Arg(4)->Arg(8)->Arg(12);

void BM_ClassifierForwardBackward(benchmark::State& state) {
  lbd::Rng rng(4);
  lbd::MlpModel model = lbd::make_mlp(
      {2, 32, 32, 2},
      {lbd::Activation::relu, lbd::Activation::relu, lbd::Activation::identity});
  lbd::init_weights(model, rng);
  lbd::attach_gate(model, 1, lbd::GateKind::bernoulli,
                   lbd::GateGranularity::per_neuron, 0.0);
  lbd::attach_gate(model, 2, lbd::GateKind::bernoulli,
                   lbd::GateGranularity::per_neuron, 0.0);
  lbd::Matrix x(256, 2);
  for (double& v : x.flat()) v = rng.normal();
  lbd::Matrix y(256, 2);
  for (std::size_t i = 0; i < 256; ++i) y(i, i % 2) = 1.0;
  for (auto _ : state) {
    const lbd::MaskSet masks = lbd::sample_masks(model, 256, rng);
    const lbd::ForwardResult f = lbd::forward_pass(model, x, masks);
    benchmark::DoNotOptimize(
        lbd::backward_pass(model, f.cache, y, lbd::LossKind::softmax_cross_entropy));
  }
}
BENCHMARK(BM_ClassifierForwardBackward);

}  // namespace

BENCHMARK_MAIN();
