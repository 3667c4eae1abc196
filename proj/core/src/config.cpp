#include "lbd/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>

#include "lbd/error.hpp"

namespace lbd {

const char* experiment_name(Experiment e) {
  switch (e) {
    case Experiment::toy_grid: return "toy-grid";
    case Experiment::toy_trace: return "toy-trace";
    case Experiment::classify: return "classify";
    case Experiment::cf: return "cf";
  }
  return "?";
}

const char* estimator_choice_name(EstimatorChoice e) {
  switch (e) {
    case EstimatorChoice::arm: return "arm";
    case EstimatorChoice::concrete: return "concrete";
    case EstimatorChoice::gaussian: return "gaussian";
    case EstimatorChoice::reinforce: return "reinforce";
    case EstimatorChoice::regular: return "regular";
    case EstimatorChoice::mc_dropout: return "mc-dropout";
  }
  return "?";
}

Experiment parse_experiment(const std::string& s) {
  if (s == "toy-grid") return Experiment::toy_grid;
  if (s == "toy-trace") return Experiment::toy_trace;
  if (s == "classify") return Experiment::classify;
  if (s == "cf") return Experiment::cf;
  throw ConfigError("unknown experiment: " + s);
}

namespace {

EstimatorChoice parse_estimator(const std::string& s) {
  if (s == "arm") return EstimatorChoice::arm;
  if (s == "concrete") return EstimatorChoice::concrete;
  if (s == "gaussian") return EstimatorChoice::gaussian;
  if (s == "reinforce") return EstimatorChoice::reinforce;
  if (s == "regular") return EstimatorChoice::regular;
  if (s == "mc-dropout") return EstimatorChoice::mc_dropout;
  throw ConfigError("unknown estimator: " + s);
}

GateGranularity parse_granularity(const std::string& s) {
  if (s == "per-neuron") return GateGranularity::per_neuron;
  if (s == "per-layer") return GateGranularity::per_layer;
  throw ConfigError("unknown gate granularity: " + s);
}

double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad numeric value for " + key + ": '" + s + "'");
  }
}

int parse_int(const std::string& key, const std::string& s) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("bad integer value for " + key + ": '" + s + "'");
  }
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("bad seed value for " + key + ": '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("bad boolean value for " + key + ": '" + s + "'");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

RunConfig default_config(Experiment e) {
  RunConfig cfg;
  cfg.experiment = e;
  switch (e) {
    case Experiment::toy_grid:
    case Experiment::toy_trace:
      break;
    case Experiment::classify:
      cfg.opt.lr = 1e-2;
      cfg.opt.epochs = 500;
      break;
    case Experiment::cf:
      cfg.opt.lr = 1e-3;
      cfg.opt.epochs = 100;
      cfg.opt.batch = 100;
      break;
  }
  return cfg;
}

void apply_key_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "experiment") {
    cfg.experiment = parse_experiment(value);
  } else if (key == "seed") {
    cfg.seed = parse_u64(key, value);
  } else if (key == "estimator") {
    cfg.estimator = parse_estimator(value);
  } else if (key == "samples") {
    cfg.samples = parse_int(key, value);
  } else if (key == "out") {
    cfg.out_dir = value;
  } else if (key == "threads") {
    cfg.threads = parse_int(key, value);
  } else if (key == "opt.lr") {
    cfg.opt.lr = parse_double(key, value);
  } else if (key == "opt.beta1") {
    cfg.opt.beta1 = parse_double(key, value);
  } else if (key == "opt.beta2") {
    cfg.opt.beta2 = parse_double(key, value);
  } else if (key == "opt.eps") {
    cfg.opt.eps = parse_double(key, value);
  } else if (key == "opt.epochs") {
    cfg.opt.epochs = parse_int(key, value);
  } else if (key == "opt.batch") {
    cfg.opt.batch = parse_int(key, value);
  } else if (key == "gate.init_logit") {
    cfg.gate.init_logit = parse_double(key, value);
  } else if (key == "gate.granularity") {
    cfg.gate.granularity = parse_granularity(value);
  } else if (key == "gate.temperature") {
    cfg.gate.temperature = parse_double(key, value);
  } else if (key == "gate.variance_cap") {
    cfg.gate.variance_cap = parse_double(key, value);
  } else if (key == "gate.regular_rate") {
    cfg.gate.regular_rate = parse_double(key, value);
  } else if (key == "gate.none") {
    cfg.gate.none = parse_bool(key, value);
  } else if (key == "bayes.prior_variance") {
    cfg.bayes.prior_variance = parse_double(key, value);
  } else if (key == "bayes.kl_weight") {
    cfg.bayes.kl_weight = parse_double(key, value);
  } else if (key == "bayes.mc_passes") {
    cfg.bayes.mc_passes = parse_int(key, value);
  } else if (key == "toy.n") {
    cfg.toy.n = parse_int(key, value);
  } else if (key == "toy.noise_sd") {
    cfg.toy.noise_sd = parse_double(key, value);
  } else if (key == "toy.slope") {
    cfg.toy.slope = parse_double(key, value);
  } else if (key == "toy.grid_min") {
    cfg.toy.grid_min = parse_double(key, value);
  } else if (key == "toy.grid_max") {
    cfg.toy.grid_max = parse_double(key, value);
  } else if (key == "toy.grid_step") {
    cfg.toy.grid_step = parse_double(key, value);
  } else if (key == "toy.grid_samples") {
    cfg.toy.grid_samples = parse_int(key, value);
  } else if (key == "toy.trace_steps") {
    cfg.toy.trace_steps = parse_int(key, value);
  } else if (key == "toy.trace_samples") {
    cfg.toy.trace_samples = parse_int(key, value);
  } else if (key == "toy.trace_lr") {
    cfg.toy.trace_lr = parse_double(key, value);
  } else if (key == "toy.trace_init_keep") {
    cfg.toy.trace_init_keep = parse_double(key, value);
  } else if (key == "moons.n") {
    cfg.moons.n = parse_int(key, value);
  } else if (key == "moons.test_n") {
    cfg.moons.test_n = parse_int(key, value);
  } else if (key == "moons.noise") {
    cfg.moons.noise = parse_double(key, value);
  } else if (key == "moons.hidden") {
    cfg.moons.hidden = parse_int(key, value);
  } else if (key == "cf.users") {
    cfg.cf.users = parse_int(key, value);
  } else if (key == "cf.items") {
    cfg.cf.items = parse_int(key, value);
  } else if (key == "cf.factors") {
    cfg.cf.factors = parse_int(key, value);
  } else if (key == "cf.popularity") {
    cfg.cf.popularity = parse_double(key, value);
  } else if (key == "cf.min_interactions") {
    cfg.cf.min_interactions = parse_int(key, value);
  } else if (key == "cf.mean_interactions") {
    cfg.cf.mean_interactions = parse_double(key, value);
  } else if (key == "cf.interactions_path") {
    cfg.cf.interactions_path = value;
  } else if (key == "cf.hidden") {
    cfg.cf.hidden = parse_int(key, value);
  } else if (key == "cf.latent") {
    cfg.cf.latent = parse_int(key, value);
  } else if (key == "cf.V") {
    cfg.cf.V = parse_int(key, value);
  } else if (key == "cf.beta_max") {
    cfg.cf.beta_max = parse_double(key, value);
  } else if (key == "cf.anneal_epochs") {
    cfg.cf.anneal_epochs = parse_int(key, value);
  } else if (key == "cf.holdout_users") {
    cfg.cf.holdout_users = parse_double(key, value);
  } else if (key == "cf.fold_in") {
    cfg.cf.fold_in = parse_double(key, value);
  } else {
    throw ConfigError("unknown config key: " + key);
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    // trim
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    const auto kend = key.find_last_not_of(" \t");
    key = key.substr(0, kend == std::string::npos ? 0 : kend + 1);
    const auto vstart = value.find_first_not_of(" \t");
    value = vstart == std::string::npos ? "" : value.substr(vstart);
    apply_key_value(cfg, key, value);
  }
}

void validate(const RunConfig& cfg) {
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  if (cfg.samples < 1) fail("samples must be >= 1");
  if (cfg.threads < 0) fail("threads must be >= 0");
  if (cfg.out_dir.empty()) fail("out directory must not be empty");
  if (cfg.opt.lr <= 0.0) fail("opt.lr must be positive");
  if (cfg.opt.beta1 < 0.0 || cfg.opt.beta1 >= 1.0) fail("opt.beta1 must lie in [0, 1)");
  if (cfg.opt.beta2 < 0.0 || cfg.opt.beta2 >= 1.0) fail("opt.beta2 must lie in [0, 1)");
  if (cfg.opt.eps <= 0.0) fail("opt.eps must be positive");
  if (cfg.opt.epochs < 1) fail("opt.epochs must be >= 1");
  if (cfg.opt.batch < 0) fail("opt.batch must be >= 0");
  if (cfg.gate.temperature <= 0.0) fail("gate.temperature must be positive");
  if (cfg.gate.variance_cap <= 0.0 || cfg.gate.variance_cap > 1.0) {
    fail("gate.variance_cap must lie in (0, 1]");
  }
  if (cfg.gate.regular_rate <= 0.0 || cfg.gate.regular_rate >= 1.0) {
    fail("gate.regular_rate must lie in (0, 1)");
  }
  if (cfg.bayes.prior_variance <= 0.0) fail("bayes.prior_variance must be positive");
  if (cfg.bayes.kl_weight < 0.0 && cfg.bayes.kl_weight != -1.0) {
    fail("bayes.kl_weight must be >= 0, or -1 for 1/N");
  }
  if (cfg.bayes.mc_passes < 1) fail("bayes.mc_passes must be >= 1");
  if (cfg.toy.n < 1) fail("toy.n must be >= 1");
  if (cfg.toy.noise_sd < 0.0) fail("toy.noise_sd must be >= 0");
  if (cfg.toy.grid_min <= 0.0 || cfg.toy.grid_max >= 1.0 ||
      cfg.toy.grid_min > cfg.toy.grid_max) {
    fail("toy grid must satisfy 0 < grid_min <= grid_max < 1");
  }
  if (cfg.toy.grid_step <= 0.0) fail("toy.grid_step must be positive");
  if (cfg.toy.grid_samples < 2) fail("toy.grid_samples must be >= 2");
  if (cfg.toy.trace_steps < 1) fail("toy.trace_steps must be >= 1");
  if (cfg.toy.trace_samples < 2) fail("toy.trace_samples must be >= 2");
  if (cfg.toy.trace_lr <= 0.0) fail("toy.trace_lr must be positive");
  if (cfg.toy.trace_init_keep <= 0.0 || cfg.toy.trace_init_keep >= 1.0) {
    fail("toy.trace_init_keep must lie in (0, 1)");
  }
  if (cfg.moons.n < 4) fail("moons.n must be >= 4");
  if (cfg.moons.test_n < 4) fail("moons.test_n must be >= 4");
  if (cfg.moons.noise < 0.0) fail("moons.noise must be >= 0");
  if (cfg.moons.hidden < 1) fail("moons.hidden must be >= 1");
  if (cfg.cf.users < 2) fail("cf.users must be >= 2");
  if (cfg.cf.items < 2) fail("cf.items must be >= 2");
  if (cfg.cf.factors < 0) fail("cf.factors must be >= 0");
  if (cfg.cf.min_interactions < 1) fail("cf.min_interactions must be >= 1");
  if (cfg.cf.mean_interactions < 0.0) fail("cf.mean_interactions must be >= 0");
  if (cfg.cf.hidden < 1 || cfg.cf.latent < 1) fail("cf network sizes must be >= 1");
  if (cfg.cf.V < 0) fail("cf.V must be >= 0");
  if (cfg.cf.beta_max < 0.0) fail("cf.beta_max must be >= 0");
  if (cfg.cf.anneal_epochs < 1) fail("cf.anneal_epochs must be >= 1");
  if (cfg.cf.holdout_users <= 0.0 || cfg.cf.holdout_users >= 1.0) {
    fail("cf.holdout_users must lie in (0, 1)");
  }
  if (cfg.cf.fold_in <= 0.0 || cfg.cf.fold_in >= 1.0) fail("cf.fold_in must lie in (0, 1)");
  if (cfg.experiment == Experiment::cf) {
    switch (cfg.estimator) {
      case EstimatorChoice::arm:
      case EstimatorChoice::concrete:
      case EstimatorChoice::gaussian:
      case EstimatorChoice::regular:
        break;
      default:
        fail("cf supports estimators arm, concrete, gaussian, regular");
    }
  }
}

std::map<std::string, std::string> RunConfig::key_values() const {
  std::map<std::string, std::string> kv;
  kv["experiment"] = experiment_name(experiment);
  kv["seed"] = std::to_string(seed);
  kv["estimator"] = estimator_choice_name(estimator);
  kv["samples"] = std::to_string(samples);
  kv["out"] = out_dir;
  kv["threads"] = std::to_string(threads);
  kv["opt.lr"] = fmt(opt.lr);
  kv["opt.beta1"] = fmt(opt.beta1);
  kv["opt.beta2"] = fmt(opt.beta2);
  kv["opt.eps"] = fmt(opt.eps);
  kv["opt.epochs"] = std::to_string(opt.epochs);
  kv["opt.batch"] = std::to_string(opt.batch);
  kv["gate.init_logit"] = fmt(gate.init_logit);
  kv["gate.granularity"] =
      gate.granularity == GateGranularity::per_neuron ? "per-neuron" : "per-layer";
  kv["gate.temperature"] = fmt(gate.temperature);
  kv["gate.variance_cap"] = fmt(gate.variance_cap);
  kv["gate.regular_rate"] = fmt(gate.regular_rate);
  kv["gate.none"] = gate.none ? "true" : "false";
  kv["bayes.prior_variance"] = fmt(bayes.prior_variance);
  kv["bayes.kl_weight"] = fmt(bayes.kl_weight);
  kv["bayes.mc_passes"] = std::to_string(bayes.mc_passes);
  kv["toy.n"] = std::to_string(toy.n);
  kv["toy.noise_sd"] = fmt(toy.noise_sd);
  kv["toy.slope"] = fmt(toy.slope);
  kv["toy.grid_min"] = fmt(toy.grid_min);
  kv["toy.grid_max"] = fmt(toy.grid_max);
  kv["toy.grid_step"] = fmt(toy.grid_step);
  kv["toy.grid_samples"] = std::to_string(toy.grid_samples);
  kv["toy.trace_steps"] = std::to_string(toy.trace_steps);
  kv["toy.trace_samples"] = std::to_string(toy.trace_samples);
  kv["toy.trace_lr"] = fmt(toy.trace_lr);
  kv["toy.trace_init_keep"] = fmt(toy.trace_init_keep);
  kv["moons.n"] = std::to_string(moons.n);
  kv["moons.test_n"] = std::to_string(moons.test_n);
  kv["moons.noise"] = fmt(moons.noise);
  kv["moons.hidden"] = std::to_string(moons.hidden);
  kv["cf.users"] = std::to_string(cf.users);
  kv["cf.items"] = std::to_string(cf.items);
  kv["cf.factors"] = std::to_string(cf.factors);
  kv["cf.popularity"] = fmt(cf.popularity);
  kv["cf.min_interactions"] = std::to_string(cf.min_interactions);
  kv["cf.mean_interactions"] = fmt(cf.mean_interactions);
  kv["cf.interactions_path"] = cf.interactions_path;
  kv["cf.hidden"] = std::to_string(cf.hidden);
  kv["cf.latent"] = std::to_string(cf.latent);
  kv["cf.V"] = std::to_string(cf.V);
  kv["cf.beta_max"] = fmt(cf.beta_max);
  kv["cf.anneal_epochs"] = std::to_string(cf.anneal_epochs);
  kv["cf.holdout_users"] = fmt(cf.holdout_users);
  kv["cf.fold_in"] = fmt(cf.fold_in);
  return kv;
}

}  // namespace lbd
