#pragma once

#include <cmath>
#include <cstdint>

namespace lbd {

inline constexpr std::uint64_t kGolden64 = 0x9e3779b97f4a7c15ULL;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += kGolden64;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// xoshiro256++ with splitmix64 seeding. The standard library distributions
// are avoided on purpose: their output is implementation-defined, and run
// records promise byte-identical reruns for a given seed.
//
// Parallel workers derive substreams keyed by (seed, index), so results do
// not depend on scheduling or thread count.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& word : state_) {
      x = splitmix64(x);
      word = x;
    }
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1]; safe as a log() argument.
  double uniform_pos() {
    return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;
  }

  // Box-Muller; two raw draws per variate keeps the stream state trivial.
  double normal() {
    const double r = std::sqrt(-2.0 * std::log(uniform_pos()));
    const double theta = 2.0 * 3.141592653589793238462643383279502884 * uniform();
    return r * std::cos(theta);
  }

  bool bernoulli(double p) { return uniform() < p; }

  Rng substream(std::uint64_t index) const {
    return Rng(splitmix64(seed_ ^ splitmix64(index + kGolden64)));
  }

  std::uint64_t seed() const { return seed_; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t state_[4];
  std::uint64_t seed_;
};

}  // namespace lbd
