#include "lbd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "lbd/error.hpp"

namespace lbd {

ToyDataset generate_toy_dataset(std::size_t n, Rng& rng, double true_slope,
                                double noise_sd) {
  if (n < 1) throw ConfigError("generate_toy_dataset: n must be >= 1");
  ToyDataset d{Matrix(n, 1), Matrix(n, 1)};
  for (std::size_t i = 0; i < n; ++i) {
    const double x = 2.0 * rng.uniform() - 1.0;
    d.x(i, 0) = x;
    d.y(i, 0) = true_slope * x + noise_sd * rng.normal();
  }
  return d;
}

MoonsDataset make_two_moons(std::size_t n, double noise, Rng& rng) {
  if (n < 2) throw ConfigError("make_two_moons: n must be >= 2");
  MoonsDataset d;
  d.x = Matrix(n, 2);
  d.targets = Matrix(n, 2);
  d.labels.resize(n);
  const double pi = 3.141592653589793238462643383279502884;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 2;
    const double t = pi * rng.uniform();
    double px, py;
    if (label == 0) {
      px = std::cos(t);
      py = std::sin(t);
    } else {
      px = 1.0 - std::cos(t);
      py = 0.5 - std::sin(t);
    }
    d.x(i, 0) = px + noise * rng.normal();
    d.x(i, 1) = py + noise * rng.normal();
    d.labels[i] = label;
    d.targets(i, label) = 1.0;
  }
  return d;
}

InteractionMatrix synthesize_implicit_feedback(const CfSynthesisConfig& cfg, Rng& rng) {
  if (cfg.users == 0 || cfg.items == 0) {
    throw ConfigError("synthesize_implicit_feedback: users and items must be positive");
  }
  if (cfg.min_interactions > cfg.items) {
    throw ConfigError("synthesize_implicit_feedback: min_interactions exceeds item count");
  }
  InteractionMatrix m;
  m.n_users = cfg.users;
  m.n_items = cfg.items;
  m.by_user.resize(cfg.users);

  std::vector<double> item_pop(cfg.items);
  for (double& p : item_pop) p = cfg.popularity_weight * rng.normal();
  Matrix user_f(cfg.users, std::max<std::size_t>(cfg.factors, 1));
  Matrix item_f(cfg.items, std::max<std::size_t>(cfg.factors, 1));
  if (cfg.factors > 0) {
    for (double& v : user_f.flat()) v = rng.normal();
    for (double& v : item_f.flat()) v = rng.normal();
  }
  const double factor_scale = cfg.factors > 0 ? 1.0 / std::sqrt(static_cast<double>(cfg.factors)) : 0.0;

  std::vector<std::pair<double, std::uint32_t>> scored(cfg.items);
  for (std::size_t u = 0; u < cfg.users; ++u) {
    // Poisson draw via inversion; the mean is small enough for the naive loop.
    std::size_t extra = 0;
    {
      const double limit = std::exp(-cfg.mean_extra_interactions);
      double prod = rng.uniform_pos();
      while (prod > limit) {
        ++extra;
        prod *= rng.uniform_pos();
      }
    }
    const std::size_t want = std::min(cfg.items, cfg.min_interactions + extra);
    for (std::size_t j = 0; j < cfg.items; ++j) {
      double affinity = item_pop[j];
      if (cfg.factors > 0) {
        double dot = 0.0;
        for (std::size_t f = 0; f < cfg.factors; ++f) dot += user_f(u, f) * item_f(j, f);
        affinity += factor_scale * dot;
      }
      const double gumbel = -std::log(-std::log(rng.uniform_pos()));
      scored[j] = {affinity + gumbel, static_cast<std::uint32_t>(j)};
    }
    std::partial_sort(scored.begin(), scored.begin() + want, scored.end(),
                      [](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return a.second < b.second;
                      });
    auto& row = m.by_user[u];
    row.reserve(want);
    for (std::size_t j = 0; j < want; ++j) row.push_back(scored[j].second);
    std::sort(row.begin(), row.end());
  }
  return m;
}

InteractionMatrix load_interactions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_interactions: cannot open " + path);
  std::unordered_map<std::string, std::uint32_t> user_ids;
  std::unordered_map<std::string, std::uint32_t> item_ids;
  InteractionMatrix m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      std::ostringstream msg;
      msg << "load_interactions: " << path << ":" << lineno << ": expected user<TAB>item";
      throw IoError(msg.str());
    }
    const std::string user = line.substr(0, tab);
    const std::string item = line.substr(tab + 1);
    auto [uit, unew] = user_ids.try_emplace(user, static_cast<std::uint32_t>(user_ids.size()));
    auto [iit, inew] = item_ids.try_emplace(item, static_cast<std::uint32_t>(item_ids.size()));
    if (unew) m.by_user.emplace_back();
    auto& row = m.by_user[uit->second];
    row.push_back(iit->second);
  }
  m.n_users = m.by_user.size();
  m.n_items = item_ids.size();
  for (auto& row : m.by_user) {
    std::sort(row.begin(), row.end());
    row.erase(std::unique(row.begin(), row.end()), row.end());
  }
  return m;
}

}  // namespace lbd
