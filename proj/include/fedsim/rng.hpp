#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace fedsim {

// Deterministic PRNG used everywhere in the simulator. We avoid the std
// distributions on purpose: their output sequences are implementation-defined,
// and experiment results must be reproducible bit-for-bit across platforms.
//
// The generator is splitmix64; streams for independent purposes (partitioning,
// per-client training, per-class generation, ...) are derived from a master
// seed by hashing a path of tags, so adding draws to one stream never perturbs
// another.

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Stream tags; values are part of the reproducibility contract.
enum class Stream : std::uint64_t {
  ToyData = 1,
  Holdout = 2,
  Partition = 3,
  ShareSelect = 4,
  Generate = 5,
  Init = 6,
  Train = 7,
};

inline std::uint64_t derive_seed(std::uint64_t master,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = master;
  for (std::uint64_t tag : path) {
    s ^= splitmix64_next(s) + tag;
    (void)splitmix64_next(s);
  }
  return s;
}

inline std::uint64_t derive_seed(std::uint64_t master, Stream stream,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
  return derive_seed(master, {static_cast<std::uint64_t>(stream), a, b});
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64_next(state_); }

  // Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n); n must be positive. Rejection sampling keeps
  // the distribution exactly uniform.
  std::size_t uniform_index(std::size_t n) {
    const std::uint64_t bound = n;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return static_cast<std::size_t>(v % bound);
  }

  // Standard normal via Box-Muller. Two uniforms per draw, no cached spare,
  // so each call consumes a fixed amount of the stream.
  double normal() {
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates; deterministic replacement for std::shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      using std::swap;
      swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace fedsim
