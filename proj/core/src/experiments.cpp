#include "lbd/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <future>
#include <thread>

#include "lbd/adam.hpp"
#include "lbd/bayes.hpp"
#include "lbd/error.hpp"
#include "lbd/estimators.hpp"
#include "lbd/metrics.hpp"
#include "lbd/sivae.hpp"

namespace lbd {

namespace {

// Substream indices off the master seed; grid points start at kGridBase.
constexpr std::uint64_t kStreamData = 0;
constexpr std::uint64_t kStreamInit = 1;
constexpr std::uint64_t kStreamTrain = 2;
constexpr std::uint64_t kStreamEstimator = 3;
constexpr std::uint64_t kStreamEval = 4;
constexpr std::uint64_t kStreamTestData = 5;
constexpr std::uint64_t kStreamSplit = 6;
constexpr std::uint64_t kStreamRandomRank = 7;
constexpr std::uint64_t kStreamFoldIn = 8;
constexpr std::uint64_t kGridBase = 16;

double logit(double p) { return std::log(p / (1.0 - p)); }

std::size_t worker_count(const RunConfig& cfg) {
  if (cfg.threads > 0) return static_cast<std::size_t>(cfg.threads);
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
        .count();
  }
};

std::filesystem::path out_path(const RunConfig& cfg, const char* name) {
  return std::filesystem::path(cfg.out_dir) / name;
}

RunRecord base_record(const RunConfig& cfg) {
  RunRecord r = make_run_record();
  r.config = cfg.key_values();
  return r;
}

// --- optimizer plumbing -----------------------------------------------------

struct NetAdamStates {
  std::vector<AdamState> w;
  std::vector<AdamState> b;
  AdamState alpha;
};

NetAdamStates make_states(const MlpModel& m) {
  NetAdamStates s;
  for (std::size_t j = 0; j < m.depth(); ++j) {
    s.w.emplace_back(m.weights[j].size());
    s.b.emplace_back(m.biases[j].size());
  }
  s.alpha = AdamState(gate_logits(m).size());
  return s;
}

void apply_param_step(MlpModel& m, const NetGradients& g, NetAdamStates& s,
                      const AdamConfig& ac) {
  for (std::size_t j = 0; j < m.depth(); ++j) {
    adam_step(m.weights[j].flat(), g.weights[j].flat(), s.w[j], ac, "weights");
    adam_step(std::span<double>(m.biases[j]),
              std::span<const double>(g.biases[j]), s.b[j], ac, "biases");
  }
}

void apply_alpha_step(MlpModel& m, std::span<const double> grads, NetAdamStates& s,
                      const AdamConfig& ac) {
  std::vector<double> logits = gate_logits(m);
  adam_step(logits, grads, s.alpha, ac, "gate_logits");
  set_gate_logits(m, logits);  // clamps to [-8, 8]
}

AdamConfig adam_config(const RunConfig& cfg) {
  return AdamConfig{cfg.opt.lr, cfg.opt.beta1, cfg.opt.beta2, cfg.opt.eps};
}

// --- toy study ---------------------------------------------------------------

MlpModel toy_model_with_keeps(const ToyStudy& study, double p1, double p2,
                              GateKind kind, double temperature) {
  MlpModel m = study.model;
  GateSpec& g = m.gates[1];
  g.kind = kind;
  g.concrete_temperature = temperature;
  g.logits = {logit(p1), logit(p2)};
  clamp_logits(g);
  return m;
}

struct TraceStats {
  double mean_error = 0.0;
  double error_se = 0.0;
  double mean_abs_dev = 0.0;
};

TraceStats trace_stats(std::span<const double> deviations) {
  TraceStats t;
  const double n = static_cast<double>(deviations.size());
  for (double d : deviations) {
    t.mean_error += d;
    t.mean_abs_dev += std::abs(d);
  }
  t.mean_error /= n;
  t.mean_abs_dev /= n;
  double ss = 0.0;
  for (double d : deviations) ss += (d - t.mean_error) * (d - t.mean_error);
  t.error_se = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  return t;
}

}  // namespace

ToyStudy make_toy_study(const RunConfig& cfg) {
  Rng master(cfg.seed);
  ToyStudy study;
  Rng data_rng = master.substream(kStreamData);
  ToyDataset data = generate_toy_dataset(static_cast<std::size_t>(cfg.toy.n), data_rng,
                                         cfg.toy.slope, cfg.toy.noise_sd);
  study.x = std::move(data.x);
  study.y = std::move(data.y);
  study.model = make_mlp({1, 2, 1}, {Activation::relu, Activation::identity});
  Rng init_rng = master.substream(kStreamInit);
  init_weights(study.model, init_rng);
  attach_gate(study.model, 1, GateKind::bernoulli, GateGranularity::per_neuron,
              cfg.gate.init_logit);
  return study;
}

std::vector<double> toy_grid_keep_rates(const RunConfig& cfg) {
  std::vector<double> keeps;
  for (double p = cfg.toy.grid_min; p <= cfg.toy.grid_max + 1e-12;
       p += cfg.toy.grid_step) {
    keeps.push_back(p);
  }
  return keeps;
}

ExperimentResult run_toy_grid(const RunConfig& cfg) {
  validate(cfg);
  Timer timer;
  const ToyStudy study = make_toy_study(cfg);
  const std::vector<double> keeps = toy_grid_keep_rates(cfg);
  const std::size_t npoints = keeps.size() * keeps.size();
  const int n_mc = cfg.toy.grid_samples;
  // Mean loss over the dataset; recorded in the run metadata.
  const double scale = 1.0 / static_cast<double>(study.x.rows());

  struct Cell {
    double p1 = 0.0, p2 = 0.0;
    EstimatorDiagnostics arm;
    EstimatorDiagnostics con;
  };
  std::vector<Cell> cells(npoints);
  Rng master(cfg.seed);

  auto run_point = [&](std::size_t idx) {
    const double p1 = keeps[idx / keeps.size()];
    const double p2 = keeps[idx % keeps.size()];
    Rng rng = master.substream(kGridBase + idx);
    MlpModel bern = toy_model_with_keeps(study, p1, p2, GateKind::bernoulli, 0.1);
    const GradEstimate exact = exact_gate_gradient(bern, study.x, study.y,
                                                   LossKind::squared_error, scale);
    std::vector<GradEstimate> arm_s;
    arm_s.reserve(n_mc);
    for (int s = 0; s < n_mc; ++s) {
      arm_s.push_back(
          arm_gradient(bern, study.x, study.y, LossKind::squared_error, scale, rng, 1));
    }
    MlpModel conc =
        toy_model_with_keeps(study, p1, p2, GateKind::concrete, cfg.gate.temperature);
    std::vector<GradEstimate> con_s;
    con_s.reserve(n_mc);
    for (int s = 0; s < n_mc; ++s) {
      con_s.push_back(concrete_gradient(conc, study.x, study.y,
                                        LossKind::squared_error, scale, rng, 1));
    }
    Cell& c = cells[idx];
    c.p1 = p1;
    c.p2 = p2;
    c.arm = estimator_diagnostics(arm_s, exact);
    c.con = estimator_diagnostics(con_s, exact);
  };

  const std::size_t workers = std::min(worker_count(cfg), npoints);
  if (workers <= 1) {
    for (std::size_t i = 0; i < npoints; ++i) run_point(i);
  } else {
    std::vector<std::future<void>> futs;
    futs.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      futs.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t i = w; i < npoints; i += workers) run_point(i);
      }));
    }
    for (auto& f : futs) f.get();
  }

  CsvTable csv;
  csv.header = {"sigma_alpha1", "sigma_alpha2", "estimator", "coordinate",
                "bias",         "std",          "mse"};
  const double sqrt_n = std::sqrt(static_cast<double>(n_mc));
  std::size_t arm_within = 0, pairs = 0, significant = 0, arm_lt = 0, mse_le = 0;
  for (const Cell& c : cells) {
    for (int which = 0; which < 2; ++which) {
      const EstimatorDiagnostics& d = which == 0 ? c.arm : c.con;
      const char* name = which == 0 ? "arm" : "concrete";
      for (std::size_t k = 0; k < 2; ++k) {
        csv.rows.push_back({format_double(c.p1), format_double(c.p2), name,
                            std::to_string(k), format_double(d.bias[k]),
                            format_double(d.stddev[k]), format_double(d.mse[k])});
      }
    }
    for (std::size_t k = 0; k < 2; ++k) {
      ++pairs;
      const double se_arm = c.arm.stddev[k] / sqrt_n;
      const double se_con = c.con.stddev[k] / sqrt_n;
      if (std::abs(c.arm.bias[k]) <= 4.0 * se_arm) ++arm_within;
      if (std::abs(c.con.bias[k]) > 4.0 * se_con) {
        ++significant;
        if (std::abs(c.arm.bias[k]) < std::abs(c.con.bias[k])) ++arm_lt;
      }
      if (c.arm.mse[k] <= c.con.mse[k]) ++mse_le;
    }
  }

  ExperimentResult result;
  result.record = base_record(cfg);
  auto& m = result.record.metrics;
  m["n_points"] = static_cast<double>(npoints);
  m["n_pairs"] = static_cast<double>(pairs);
  m["mc_samples"] = static_cast<double>(n_mc);
  m["arm_bias_within_4se_frac"] =
      static_cast<double>(arm_within) / static_cast<double>(pairs);
  m["n_concrete_bias_significant"] = static_cast<double>(significant);
  m["arm_bias_lt_concrete_frac_significant"] =
      significant == 0 ? 1.0
                       : static_cast<double>(arm_lt) / static_cast<double>(significant);
  m["arm_mse_le_concrete_frac"] =
      static_cast<double>(mse_le) / static_cast<double>(pairs);
  result.record.metadata["loss_scale"] = "mean over dataset (1/n)";
  result.record.metadata["grid"] = format_double(cfg.toy.grid_min) + ":" +
                                   format_double(cfg.toy.grid_max) + ":" +
                                   format_double(cfg.toy.grid_step);

  const auto csv_path = out_path(cfg, "grid.csv");
  write_csv_atomic(csv, csv_path);
  result.record.wall_seconds = timer.seconds();
  const auto record_path = out_path(cfg, "record.json");
  write_run_record(result.record, record_path);
  result.outputs = {csv_path, record_path};
  return result;
}

ExperimentResult run_toy_trace(const RunConfig& cfg) {
  validate(cfg);
  Timer timer;
  const ToyStudy study = make_toy_study(cfg);
  const double scale = 1.0 / static_cast<double>(study.x.rows());
  const double a0 = logit(cfg.toy.trace_init_keep);

  MlpModel bern = toy_model_with_keeps(study, cfg.toy.trace_init_keep,
                                       cfg.toy.trace_init_keep, GateKind::bernoulli, 0.1);
  Rng master(cfg.seed);
  Rng est_rng = master.substream(kStreamEstimator);

  CsvTable csv;
  csv.header = {"step", "coordinate", "true_grad", "arm_estimate", "concrete_estimate"};
  std::vector<std::vector<double>> arm_dev(2), con_dev(2);
  std::vector<double> alpha = {a0, a0};
  for (int step = 0; step < cfg.toy.trace_steps; ++step) {
    set_gate_logits(bern, alpha);
    MlpModel conc = bern;
    conc.gates[1].kind = GateKind::concrete;
    conc.gates[1].concrete_temperature = cfg.gate.temperature;

    const GradEstimate exact = exact_gate_gradient(bern, study.x, study.y,
                                                   LossKind::squared_error, scale);
    const GradEstimate arm = arm_gradient(bern, study.x, study.y,
                                          LossKind::squared_error, scale, est_rng,
                                          cfg.toy.trace_samples);
    const GradEstimate con = concrete_gradient(conc, study.x, study.y,
                                               LossKind::squared_error, scale, est_rng,
                                               cfg.toy.trace_samples);
    for (std::size_t k = 0; k < 2; ++k) {
      csv.rows.push_back({std::to_string(step), std::to_string(k),
                          format_double(exact.grads[k]), format_double(arm.grads[k]),
                          format_double(con.grads[k])});
      arm_dev[k].push_back(arm.grads[k] - exact.grads[k]);
      con_dev[k].push_back(con.grads[k] - exact.grads[k]);
    }
    // Descent on the exact gradients; the estimators are observers only.
    for (std::size_t k = 0; k < 2; ++k) alpha[k] -= cfg.toy.trace_lr * exact.grads[k];
  }

  ExperimentResult result;
  result.record = base_record(cfg);
  auto& m = result.record.metrics;
  double arm_abs = 0.0, con_abs = 0.0;
  for (std::size_t k = 0; k < 2; ++k) {
    const TraceStats as = trace_stats(arm_dev[k]);
    const TraceStats cs = trace_stats(con_dev[k]);
    const std::string suffix = "_c" + std::to_string(k);
    m["arm_mean_error" + suffix] = as.mean_error;
    m["arm_error_se" + suffix] = as.error_se;
    m["arm_mean_abs_dev" + suffix] = as.mean_abs_dev;
    m["concrete_mean_error" + suffix] = cs.mean_error;
    m["concrete_error_se" + suffix] = cs.error_se;
    m["concrete_mean_abs_dev" + suffix] = cs.mean_abs_dev;
    arm_abs += as.mean_abs_dev;
    con_abs += cs.mean_abs_dev;
  }
  m["arm_mean_abs_dev"] = arm_abs / 2.0;
  m["concrete_mean_abs_dev"] = con_abs / 2.0;
  result.record.metadata["loss_scale"] = "mean over dataset (1/n)";

  const auto csv_path = out_path(cfg, "trace.csv");
  write_csv_atomic(csv, csv_path);
  result.record.wall_seconds = timer.seconds();
  const auto record_path = out_path(cfg, "record.json");
  write_run_record(result.record, record_path);
  result.outputs = {csv_path, record_path};
  return result;
}

// --- classification ----------------------------------------------------------

namespace {

bool estimator_trains_gates(EstimatorChoice e) {
  switch (e) {
    case EstimatorChoice::arm:
    case EstimatorChoice::concrete:
    case EstimatorChoice::gaussian:
    case EstimatorChoice::reinforce:
      return true;
    case EstimatorChoice::regular:
    case EstimatorChoice::mc_dropout:
      return false;
  }
  return false;
}

GateKind estimator_gate_kind(EstimatorChoice e) {
  switch (e) {
    case EstimatorChoice::concrete:
      return GateKind::concrete;
    case EstimatorChoice::gaussian:
      return GateKind::gaussian;
    default:
      return GateKind::bernoulli;
  }
}

MlpModel build_classifier(const RunConfig& cfg, Rng& init_rng) {
  const std::size_t h = static_cast<std::size_t>(cfg.moons.hidden);
  MlpModel m = make_mlp({2, h, h, 2},
                        {Activation::relu, Activation::relu, Activation::identity});
  init_weights(m, init_rng);
  if (!cfg.gate.none) {
    const GateKind kind = estimator_gate_kind(cfg.estimator);
    const bool trains = estimator_trains_gates(cfg.estimator);
    const double init_logit =
        trains ? cfg.gate.init_logit : logit(cfg.gate.regular_rate);
    for (std::size_t layer : {std::size_t{1}, std::size_t{2}}) {
      attach_gate(m, layer, kind, cfg.gate.granularity, init_logit);
      m.gates[layer].concrete_temperature = cfg.gate.temperature;
      m.gates[layer].gaussian_variance_cap = cfg.gate.variance_cap;
    }
  }
  return m;
}

// Deterministic single-pass summary; eval masks are the gate means (or
// identity for the inverted-scaling regular baseline).
PredictiveSummary deterministic_summary(const MlpModel& model, const Matrix& x,
                                        const MaskSet& masks) {
  const Matrix out = forward_eval(model, x, masks);
  PredictiveSummary s;
  s.mean_probs = Matrix(out.rows(), out.cols());
  s.entropy.resize(out.rows());
  s.predicted.resize(out.rows());
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const auto o = out.row(i);
    double mx = o[0];
    for (double v : o) mx = std::max(mx, v);
    double sum = 0.0;
    const auto p = s.mean_probs.row(i);
    for (std::size_t c = 0; c < o.size(); ++c) {
      p[c] = std::exp(o[c] - mx);
      sum += p[c];
    }
    double h = 0.0;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < o.size(); ++c) {
      p[c] /= sum;
      if (p[c] > 0.0) h -= p[c] * std::log(p[c]);
      if (p[c] > p[arg]) arg = c;
    }
    s.entropy[i] = h;
    s.predicted[i] = arg;
  }
  return s;
}

MaskSet eval_masks(const MlpModel& model, const RunConfig& cfg, std::size_t batch) {
  if (cfg.gate.none) return MaskSet{};
  if (cfg.estimator == EstimatorChoice::regular) return ones_masks(model, batch);
  return expected_masks(model, batch);
}

double accuracy_of(const PredictiveSummary& s, std::span<const std::size_t> labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (s.predicted[i] == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace

ExperimentResult run_classification(const RunConfig& cfg) {
  validate(cfg);
  Timer timer;
  Rng master(cfg.seed);
  Rng data_rng = master.substream(kStreamData);
  Rng test_rng = master.substream(kStreamTestData);
  const MoonsDataset train =
      make_two_moons(static_cast<std::size_t>(cfg.moons.n), cfg.moons.noise, data_rng);
  const MoonsDataset test = make_two_moons(static_cast<std::size_t>(cfg.moons.test_n),
                                           cfg.moons.noise, test_rng);

  Rng init_rng = master.substream(kStreamInit);
  MlpModel model = build_classifier(cfg, init_rng);
  const std::vector<double> logits0 = gate_logits(model);
  NetAdamStates states = make_states(model);
  const AdamConfig ac = adam_config(cfg);

  Rng train_rng = master.substream(kStreamTrain);
  Rng est_rng = master.substream(kStreamEstimator);

  const std::size_t n = train.x.rows();
  const std::size_t batch_size =
      cfg.opt.batch == 0 ? n : std::min<std::size_t>(cfg.opt.batch, n);
  const double kl_w = cfg.bayes.kl_weight == -1.0
                          ? 1.0 / static_cast<double>(n)
                          : cfg.bayes.kl_weight;
  const bool gates_trainable = !cfg.gate.none && estimator_trains_gates(cfg.estimator);
  const bool relaxed = !cfg.gate.none && (cfg.estimator == EstimatorChoice::concrete ||
                                          cfg.estimator == EstimatorChoice::gaussian);
  if (kl_w != 0.0 && !gates_trainable) {
    throw ConfigError("classify: bayes.kl_weight needs trainable bernoulli gates");
  }

  CsvTable epochs_csv;
  epochs_csv.header = {"epoch", "loss", "train_accuracy"};
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  ExperimentResult result;
  result.record = base_record(cfg);

  for (int epoch = 0; epoch < cfg.opt.epochs; ++epoch) {
    if (batch_size < n) {
      // Fisher-Yates off the training stream; order is part of the seed.
      for (std::size_t i = n - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(train_rng.uniform() * (i + 1));
        std::swap(order[i], order[std::min(j, i)]);
      }
    }
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t stop = std::min(n, start + batch_size);
      std::vector<std::size_t> idx(order.begin() + start, order.begin() + stop);
      const Matrix xb = gather_rows(train.x, idx);
      const Matrix yb = gather_rows(train.targets, idx);
      const std::size_t bsz = xb.rows();
      const double inv_m = 1.0 / static_cast<double>(bsz);

      MaskSet masks;
      std::vector<Matrix> dmask(model.depth());
      if (!cfg.gate.none) {
        if (relaxed) {
          masks.by_layer.resize(model.depth());
          for (std::size_t j = 0; j < model.depth(); ++j) {
            if (!model.gates[j].gated()) continue;
            RelaxedMaskSample s =
                cfg.estimator == EstimatorChoice::concrete
                    ? sample_concrete_masks(model.gates[j], bsz, model.layer_sizes[j],
                                            train_rng)
                    : sample_gaussian_masks(model.gates[j], bsz, model.layer_sizes[j],
                                            train_rng);
            masks.by_layer[j] = std::move(s.mask);
            dmask[j] = std::move(s.dmask_dlogit);
          }
        } else {
          masks = sample_masks(model, bsz, train_rng);
          if (cfg.estimator == EstimatorChoice::regular) {
            // Inverted scaling at train time; identity at test.
            for (std::size_t j = 0; j < model.depth(); ++j) {
              if (masks.has(j)) scale_inplace(masks.by_layer[j], 1.0 / cfg.gate.regular_rate);
            }
          }
        }
      }

      ForwardResult fwd = forward_pass(model, xb, masks);
      double loss =
          empirical_loss(fwd.outputs, yb, LossKind::softmax_cross_entropy);
      BackwardOptions opts;
      opts.want_mask_grads = relaxed;
      BackwardResult back = backward_from_output_grad(
          model, fwd.cache,
          loss_output_grad(fwd.outputs, yb, LossKind::softmax_cross_entropy), opts);

      std::vector<double> agrad;
      if (gates_trainable) {
        if (cfg.estimator == EstimatorChoice::arm) {
          agrad = arm_gradient(model, xb, yb, LossKind::softmax_cross_entropy, inv_m,
                               est_rng, cfg.samples)
                      .grads;
        } else if (cfg.estimator == EstimatorChoice::reinforce) {
          agrad = reinforce_gradient(model, xb, yb, LossKind::softmax_cross_entropy,
                                     inv_m, est_rng, cfg.samples)
                      .grads;
        } else {
          // Pathwise through the relaxed masks of this very pass.
          const GateLayout layout = gate_layout(model);
          agrad.assign(layout.total, 0.0);
          for (const auto& blk : layout.blocks) {
            const Matrix& mg = back.mask_grads[blk.layer];
            const Matrix& dm = dmask[blk.layer];
            for (std::size_t i = 0; i < bsz; ++i) {
              for (std::size_t c = 0; c < blk.width; ++c) {
                const std::size_t k = blk.count == 1 ? blk.offset : blk.offset + c;
                agrad[k] += mg(i, c) * dm(i, c);
              }
            }
          }
        }
      }

      if (kl_w != 0.0) {
        const KlTerm kl = kl_regularizer(model, cfg.bayes.prior_variance);
        loss += kl_w * kl.value;
        for (std::size_t j = 0; j < model.depth(); ++j) {
          if (!kl.dweights[j].empty()) {
            add_inplace(back.grads.weights[j], [&] {
              Matrix scaled = kl.dweights[j];
              scale_inplace(scaled, kl_w);
              return scaled;
            }());
          }
        }
        for (std::size_t k = 0; k < agrad.size(); ++k) {
          agrad[k] += kl_w * kl.dlogits[k];
        }
      }

      apply_param_step(model, back.grads, states, ac);
      if (!agrad.empty()) apply_alpha_step(model, agrad, states, ac);
      epoch_loss += loss * static_cast<double>(bsz);
      seen += bsz;
    }
    epoch_loss /= static_cast<double>(seen);

    const PredictiveSummary proxy =
        deterministic_summary(model, train.x, eval_masks(model, cfg, n));
    const double train_acc = accuracy_of(proxy, train.labels);
    epochs_csv.rows.push_back({std::to_string(epoch), format_double(epoch_loss),
                               format_double(train_acc)});
    std::map<std::string, double> em;
    em["epoch"] = epoch;
    em["loss"] = epoch_loss;
    em["train_accuracy"] = train_acc;
    result.record.epochs.push_back(std::move(em));
  }

  // Final evaluation: posterior-mean probabilities and predictive entropy
  // from S stochastic passes (a single deterministic pass for the
  // inverted-scaling regular baseline).
  Rng eval_rng = master.substream(kStreamEval);
  const bool stochastic_eval = !cfg.gate.none && cfg.estimator != EstimatorChoice::regular;
  PredictiveSummary train_summary =
      stochastic_eval
          ? predictive_posterior(model, train.x, cfg.bayes.mc_passes, eval_rng)
          : deterministic_summary(model, train.x, eval_masks(model, cfg, n));
  PredictiveSummary test_summary =
      stochastic_eval
          ? predictive_posterior(model, test.x, cfg.bayes.mc_passes, eval_rng)
          : deterministic_summary(model, test.x, eval_masks(model, cfg, test.x.rows()));
  score_against_labels(train_summary, train.labels);
  score_against_labels(test_summary, test.labels);

  std::vector<double> ts;
  for (int i = 1; i <= 9; ++i) ts.push_back(0.1 * i);
  const PavpuSweep sweep = pavpu_sweep(test_summary, test.labels, ts);
  const PavpuReport boundary = pavpu(test_summary, test.labels, 1.0);

  CsvTable pavpu_csv;
  pavpu_csv.header = {"t", "entropy_threshold", "n_ac", "n_ic", "n_au", "n_iu", "pavpu"};
  auto pavpu_row = [&](const PavpuReport& r) {
    pavpu_csv.rows.push_back({format_double(r.threshold_t),
                              format_double(r.entropy_threshold),
                              std::to_string(r.n_ac), std::to_string(r.n_ic),
                              std::to_string(r.n_au), std::to_string(r.n_iu),
                              format_double(r.pavpu)});
  };
  for (const PavpuReport& r : sweep.reports) pavpu_row(r);
  pavpu_row(boundary);

  double max_move = 0.0;
  const std::vector<double> logits1 = gate_logits(model);
  for (std::size_t k = 0; k < logits1.size(); ++k) {
    max_move = std::max(max_move, std::abs(logits1[k] - logits0[k]));
  }
  double mean_keep = 0.0;
  for (double a : logits1) mean_keep += sigmoid(a);
  if (!logits1.empty()) mean_keep /= static_cast<double>(logits1.size());

  auto& m = result.record.metrics;
  m["train_accuracy"] = accuracy_of(train_summary, train.labels);
  m["test_accuracy"] = accuracy_of(test_summary, test.labels);
  m["mean_pavpu"] = sweep.mean_pavpu;
  m["pavpu_t1"] = boundary.pavpu;
  m["max_logit_move"] = max_move;
  m["mean_keep_probability"] = mean_keep;
  m["final_loss"] = result.record.epochs.back().at("loss");
  result.record.metadata["pavpu_ts"] = "0.1..0.9 step 0.1 (mean); 1.0 reported as pavpu_t1";
  result.record.metadata["loss_scale"] = "mean over batch (1/M)";

  const auto train_path = out_path(cfg, "training.csv");
  const auto pavpu_path = out_path(cfg, "pavpu.csv");
  write_csv_atomic(epochs_csv, train_path);
  write_csv_atomic(pavpu_csv, pavpu_path);
  result.record.wall_seconds = timer.seconds();
  const auto record_path = out_path(cfg, "record.json");
  write_run_record(result.record, record_path);
  result.outputs = {train_path, pavpu_path, record_path};
  return result;
}

// --- collaborative filtering -------------------------------------------------

namespace {

Matrix interaction_rows(const InteractionMatrix& data,
                        std::span<const std::size_t> users) {
  Matrix x(users.size(), data.n_items);
  for (std::size_t r = 0; r < users.size(); ++r) {
    for (std::uint32_t item : data.by_user[users[r]]) x(r, item) = 1.0;
  }
  return x;
}

SivaeModel build_sivae(const RunConfig& cfg, std::size_t items, Rng& init_rng) {
  SivaeModel m;
  const std::size_t hidden = static_cast<std::size_t>(cfg.cf.hidden);
  const std::size_t latent = static_cast<std::size_t>(cfg.cf.latent);
  m.latent_dim = latent;
  m.likelihood = Likelihood::multinomial;
  m.beta = 0.0;
  m.encoder = make_mlp({items, hidden, 2 * latent},
                       {Activation::relu, Activation::identity});
  m.decoder = make_mlp({latent, hidden, items},
                       {Activation::relu, Activation::identity});
  init_weights(m.encoder, init_rng);
  init_weights(m.decoder, init_rng);
  if (!cfg.gate.none) {
    const GateKind kind = estimator_gate_kind(cfg.estimator);
    const bool trains = estimator_trains_gates(cfg.estimator);
    const double init_logit =
        trains ? cfg.gate.init_logit : logit(cfg.gate.regular_rate);
    attach_gate(m.encoder, 0, kind, cfg.gate.granularity, init_logit);
    m.encoder.gates[0].concrete_temperature = cfg.gate.temperature;
    m.encoder.gates[0].gaussian_variance_cap = cfg.gate.variance_cap;
  }
  return m;
}

struct CfEvalResult {
  RankingMetrics model, popularity, random;
  std::size_t excluded = 0;
};

}  // namespace

ExperimentResult run_cf(const RunConfig& cfg) {
  validate(cfg);
  Timer timer;
  Rng master(cfg.seed);

  InteractionMatrix data;
  if (!cfg.cf.interactions_path.empty()) {
    data = load_interactions(cfg.cf.interactions_path);
  } else {
    CfSynthesisConfig syn;
    syn.users = static_cast<std::size_t>(cfg.cf.users);
    syn.items = static_cast<std::size_t>(cfg.cf.items);
    syn.factors = static_cast<std::size_t>(cfg.cf.factors);
    syn.popularity_weight = cfg.cf.popularity;
    syn.min_interactions = static_cast<std::size_t>(cfg.cf.min_interactions);
    syn.mean_extra_interactions = cfg.cf.mean_interactions;
    Rng data_rng = master.substream(kStreamData);
    data = synthesize_implicit_feedback(syn, data_rng);
  }
  if (data.n_users < 2) throw ConfigError("cf: need at least two users");

  // Held-out users are encoded from 80% of their interactions; the other
  // 20% are the ranking targets. Remaining users train the model.
  std::vector<std::size_t> perm(data.n_users);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng split_rng = master.substream(kStreamSplit);
  for (std::size_t i = perm.size() - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(split_rng.uniform() * (i + 1));
    std::swap(perm[i], perm[std::min(j, i)]);
  }
  const std::size_t n_holdout = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.cf.holdout_users *
                                               static_cast<double>(data.n_users))));
  std::vector<std::size_t> eval_users(perm.end() - n_holdout, perm.end());
  std::vector<std::size_t> train_users(perm.begin(), perm.end() - n_holdout);
  std::sort(eval_users.begin(), eval_users.end());
  std::sort(train_users.begin(), train_users.end());
  if (train_users.empty()) throw ConfigError("cf: no training users left");

  Rng init_rng = master.substream(kStreamInit);
  SivaeModel model = build_sivae(cfg, data.n_items, init_rng);
  const std::vector<double> logits0 = gate_logits(model.encoder);
  NetAdamStates enc_states = make_states(model.encoder);
  NetAdamStates dec_states = make_states(model.decoder);
  const AdamConfig ac = adam_config(cfg);
  const bool gates_trainable =
      !cfg.gate.none && estimator_trains_gates(cfg.estimator);
  const bool arm_gates = gates_trainable && cfg.estimator == EstimatorChoice::arm;
  const int V = cfg.estimator == EstimatorChoice::regular || cfg.gate.none
                    ? 0
                    : cfg.cf.V;

  Rng train_rng = master.substream(kStreamTrain);
  Rng est_rng = master.substream(kStreamEstimator);
  const std::size_t n_train = train_users.size();
  const std::size_t batch_size =
      cfg.opt.batch == 0 ? n_train : std::min<std::size_t>(cfg.opt.batch, n_train);

  CsvTable epochs_csv;
  epochs_csv.header = {"epoch", "beta", "loss"};
  ExperimentResult result;
  result.record = base_record(cfg);

  std::vector<std::size_t> order = train_users;
  for (int epoch = 0; epoch < cfg.opt.epochs; ++epoch) {
    model.beta = beta_schedule(static_cast<std::size_t>(epoch),
                               static_cast<std::size_t>(cfg.cf.anneal_epochs),
                               cfg.cf.beta_max);
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(train_rng.uniform() * (i + 1));
      std::swap(order[i], order[std::min(j, i)]);
    }
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < n_train; start += batch_size) {
      const std::size_t stop = std::min(n_train, start + batch_size);
      const std::span<const std::size_t> users(order.data() + start, stop - start);
      const Matrix xb = interaction_rows(data, users);
      SivaeEval ev = sivae_objective(model, xb, V, train_rng);
      std::vector<double> agrad;
      if (gates_trainable) {
        if (arm_gates) {
          agrad = sivae_alpha_gradient_arm(model, xb, V,
                                           1.0 / static_cast<double>(xb.rows()),
                                           est_rng, cfg.samples)
                      .grads;
        } else {
          agrad = ev.alpha_grads;
        }
      }
      apply_param_step(model.encoder, ev.encoder_grads, enc_states, ac);
      apply_param_step(model.decoder, ev.decoder_grads, dec_states, ac);
      if (!agrad.empty()) apply_alpha_step(model.encoder, agrad, enc_states, ac);
      epoch_loss += ev.loss * static_cast<double>(xb.rows());
      seen += xb.rows();
    }
    epoch_loss /= static_cast<double>(seen);
    epochs_csv.rows.push_back({std::to_string(epoch), format_double(model.beta),
                               format_double(epoch_loss)});
    std::map<std::string, double> em;
    em["epoch"] = epoch;
    em["beta"] = model.beta;
    em["loss"] = epoch_loss;
    result.record.epochs.push_back(std::move(em));
  }

  // Fold-in evaluation. Item popularity comes from training users only.
  std::vector<double> popularity(data.n_items, 0.0);
  for (std::size_t u : train_users) {
    for (std::uint32_t item : data.by_user[u]) popularity[item] += 1.0;
  }

  Rng fold_master = master.substream(kStreamFoldIn);
  Rng rand_master = master.substream(kStreamRandomRank);

  std::vector<std::size_t> usable;
  std::vector<std::vector<std::uint32_t>> fold_in(data.n_users);
  std::vector<std::vector<std::uint32_t>> held_out(data.n_users);
  std::size_t excluded = 0;
  for (std::size_t u : eval_users) {
    const auto& items = data.by_user[u];
    if (items.size() < 2) {
      ++excluded;
      std::fprintf(stderr, "warning: cf eval user %zu has %zu interaction(s); excluded\n",
                   u, items.size());
      continue;
    }
    std::vector<std::uint32_t> shuffled = items;
    Rng r = fold_master.substream(u);
    for (std::size_t i = shuffled.size() - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(r.uniform() * (i + 1));
      std::swap(shuffled[i], shuffled[std::min(j, i)]);
    }
    std::size_t n_in = static_cast<std::size_t>(
        std::llround(cfg.cf.fold_in * static_cast<double>(shuffled.size())));
    n_in = std::clamp<std::size_t>(n_in, 1, shuffled.size() - 1);
    fold_in[u].assign(shuffled.begin(), shuffled.begin() + n_in);
    held_out[u].assign(shuffled.begin() + n_in, shuffled.end());
    usable.push_back(u);
  }
  if (usable.empty()) throw ConfigError("cf: no evaluable held-out users");

  Matrix x_in(usable.size(), data.n_items);
  for (std::size_t r = 0; r < usable.size(); ++r) {
    for (std::uint32_t item : fold_in[usable[r]]) x_in(r, item) = 1.0;
  }
  const MaskSet emasks = cfg.gate.none
                             ? MaskSet{}
                             : expected_masks(model.encoder, usable.size());
  const GaussianParams enc = encode(model, x_in, emasks);
  const Matrix scores = forward_eval(model.decoder, enc.mean, MaskSet{});

  auto eval_ranking = [&](auto&& score_of) {
    RankingMetrics acc;
    for (std::size_t r = 0; r < usable.size(); ++r) {
      const std::size_t u = usable[r];
      std::vector<std::uint8_t> exclude(data.n_items, 0);
      for (std::uint32_t item : fold_in[u]) exclude[item] = 1;
      std::vector<std::uint8_t> relevant(data.n_items, 0);
      for (std::uint32_t item : held_out[u]) relevant[item] = 1;
      const std::vector<double> s = score_of(r, u);
      const std::vector<std::size_t> ranking = rank_items(s, exclude);
      acc.recall_at_20 += recall_at_r(ranking, relevant, 20);
      acc.recall_at_50 += recall_at_r(ranking, relevant, 50);
      acc.ndcg_at_100 += ndcg_at_r(ranking, relevant, 100);
    }
    const double n = static_cast<double>(usable.size());
    acc.recall_at_20 /= n;
    acc.recall_at_50 /= n;
    acc.ndcg_at_100 /= n;
    acc.users = usable.size();
    return acc;
  };

  const RankingMetrics model_metrics = eval_ranking([&](std::size_t r, std::size_t) {
    const auto row = scores.row(r);
    return std::vector<double>(row.begin(), row.end());
  });
  const RankingMetrics pop_metrics =
      eval_ranking([&](std::size_t, std::size_t) { return popularity; });
  const RankingMetrics rand_metrics = eval_ranking([&](std::size_t, std::size_t u) {
    Rng r = rand_master.substream(u);
    std::vector<double> s(data.n_items);
    for (double& v : s) v = r.uniform();
    return s;
  });

  double max_move = 0.0;
  const std::vector<double> logits1 = gate_logits(model.encoder);
  for (std::size_t k = 0; k < logits1.size(); ++k) {
    max_move = std::max(max_move, std::abs(logits1[k] - logits0[k]));
  }

  auto& m = result.record.metrics;
  m["recall_at_20"] = model_metrics.recall_at_20;
  m["recall_at_50"] = model_metrics.recall_at_50;
  m["ndcg_at_100"] = model_metrics.ndcg_at_100;
  m["recall_at_20_popularity"] = pop_metrics.recall_at_20;
  m["recall_at_50_popularity"] = pop_metrics.recall_at_50;
  m["ndcg_at_100_popularity"] = pop_metrics.ndcg_at_100;
  m["recall_at_20_random"] = rand_metrics.recall_at_20;
  m["recall_at_50_random"] = rand_metrics.recall_at_50;
  m["ndcg_at_100_random"] = rand_metrics.ndcg_at_100;
  m["n_eval_users"] = static_cast<double>(usable.size());
  m["n_excluded_users"] = static_cast<double>(excluded);
  m["n_train_users"] = static_cast<double>(train_users.size());
  m["final_beta"] = model.beta;
  m["final_loss"] = result.record.epochs.back().at("loss");
  m["max_logit_move"] = max_move;
  result.record.metadata["beta_placement"] =
      "beta multiplies log p(eta) - log qmix (the KL-like part)";
  result.record.metadata["loss_scale"] = "mean over batch (1/M)";
  result.record.metadata["sivae_V"] = std::to_string(V);

  const auto train_path = out_path(cfg, "training.csv");
  write_csv_atomic(epochs_csv, train_path);
  result.record.wall_seconds = timer.seconds();
  const auto record_path = out_path(cfg, "record.json");
  write_run_record(result.record, record_path);
  result.outputs = {train_path, record_path};
  return result;
}

ExperimentResult run_experiment(const RunConfig& cfg) {
  switch (cfg.experiment) {
    case Experiment::toy_grid:
      return run_toy_grid(cfg);
    case Experiment::toy_trace:
      return run_toy_trace(cfg);
    case Experiment::classify:
      return run_classification(cfg);
    case Experiment::cf:
      return run_cf(cfg);
  }
  throw ConfigError("unknown experiment");
}

}  // namespace lbd
