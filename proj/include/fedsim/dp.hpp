#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

namespace detail {

inline double std_normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

}  // namespace detail

// Noise scale for the Gaussian mechanism via the analytic calibration (alpha
// search on the mechanism's privacy profile), after splitting the budget
// linearly across num_queries releases: each release gets (eps/n, delta/n).
inline double gaussian_sigma(double epsilon, double delta, double sensitivity,
                             int num_queries) {
  if (!(epsilon > 0.0))
    throw domain_error("gaussian_sigma: epsilon must be positive");
  if (!(delta > 0.0 && delta < 1.0))
    throw domain_error("gaussian_sigma: delta must lie in (0,1)");
  if (!(sensitivity > 0.0))
    throw domain_error("gaussian_sigma: sensitivity must be positive");
  if (num_queries < 1)
    throw domain_error("gaussian_sigma: num_queries must be >= 1");
  const double eps = epsilon / num_queries;
  const double del = delta / num_queries;
  // B+/B- are the profile evaluated at sigma parameterized by v; B+ rises
  // from delta0 toward 1, B- falls from delta0 toward 0.
  auto b_plus = [&](double v) {
    return detail::std_normal_cdf(std::sqrt(eps * v)) -
           std::exp(eps) * detail::std_normal_cdf(-std::sqrt(eps * (v + 2.0)));
  };
  auto b_minus = [&](double v) {
    return detail::std_normal_cdf(-std::sqrt(eps * v)) -
           std::exp(eps) * detail::std_normal_cdf(-std::sqrt(eps * (v + 2.0)));
  };
  const double delta0 = b_plus(0.0);
  double alpha;
  if (del >= delta0) {
    double lo = 0.0, hi = 1.0;
    while (b_plus(hi) < del && hi < 1e12) hi *= 2.0;
    for (int i = 0; i < 200; ++i) {
      const double mid = 0.5 * (lo + hi);
      (b_plus(mid) < del ? lo : hi) = mid;
    }
    const double v = 0.5 * (lo + hi);
    alpha = std::sqrt(1.0 + v / 2.0) - std::sqrt(v / 2.0);
  } else {
    double lo = 0.0, hi = 1.0;
    while (b_minus(hi) > del && hi < 1e12) hi *= 2.0;
    for (int i = 0; i < 200; ++i) {
      const double mid = 0.5 * (lo + hi);
      (b_minus(mid) > del ? lo : hi) = mid;
    }
    const double v = 0.5 * (lo + hi);
    alpha = std::sqrt(1.0 + v / 2.0) + std::sqrt(v / 2.0);
  }
  const double sigma = alpha * sensitivity / std::sqrt(2.0 * eps);
  if (!(sigma > 0.0) || !std::isfinite(sigma))
    throw numeric_error("gaussian_sigma: calibration failed");
  return sigma;
}

// Per-client ledger of noisy releases. sigma 0 is permitted only through
// with_sigma, for non-private ablations.
struct PrivacyBudget {
  double epsilon = 10.0;
  double delta = 1e-5;
  double sigma = 0.0;
  int max_queries = 0;
  int queries_used = 0;

  static PrivacyBudget calibrated(double epsilon, double delta,
                                  double sensitivity, int num_queries) {
    PrivacyBudget b;
    b.epsilon = epsilon;
    b.delta = delta;
    b.sigma = gaussian_sigma(epsilon, delta, sensitivity, num_queries);
    b.max_queries = num_queries;
    return b;
  }

  static PrivacyBudget with_sigma(double sigma, int max_queries) {
    if (sigma < 0.0) throw domain_error("privacy budget: negative sigma");
    PrivacyBudget b;
    b.sigma = sigma;
    b.max_queries = max_queries;
    return b;
  }

  int remaining() const { return max_queries - queries_used; }

  void charge(const char* context) {
    if (queries_used >= max_queries)
      throw privacy_error(std::string(context) + ": query budget exhausted (" +
                          std::to_string(max_queries) + " queries allowed)");
    ++queries_used;
  }

  // delta at or above 1/n gives a vacuous guarantee for an n-element set.
  bool delta_too_large_for(std::size_t private_size) const {
    return private_size > 0 && delta >= 1.0 / static_cast<double>(private_size);
  }
};

// One noisy release: nearest-candidate histogram of the private set (L2 on
// flattened features, ties to the lowest candidate index) plus independent
// N(0, sigma^2) per bin. Charges the ledger before computing anything.
inline std::vector<double> dp_nn_histogram(const LabeledDataset& private_set,
                                           const std::vector<Tensor>& candidates,
                                           double sigma, PrivacyBudget& budget,
                                           Rng& noise_rng) {
  if (candidates.empty()) throw domain_error("dp_nn_histogram: no candidates");
  if (private_set.empty())
    throw domain_error("dp_nn_histogram: empty private set");
  if (sigma < 0.0) throw domain_error("dp_nn_histogram: negative sigma");
  budget.charge("dp_nn_histogram");
  std::vector<double> hist(candidates.size(), 0.0);
  for (const auto& e : private_set.examples) {
    std::size_t best = 0;
    double best_d = l2_distance(e.features, candidates[0]);
    for (std::size_t j = 1; j < candidates.size(); ++j) {
      const double d = l2_distance(e.features, candidates[j]);
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    hist[best] += 1.0;
  }
  for (auto& h : hist) h += noise_rng.normal(0.0, sigma);
  return hist;
}

enum class GeneratorKind : std::uint8_t { PrivateEvolutionLite = 0, HeldOutOracle = 1 };

struct GeneratorConfig {
  GeneratorKind kind = GeneratorKind::HeldOutOracle;
  int iterations = 1;    // noisy releases per (client, class)
  int population = 10;
  int survivors = 5;
  double variation_scale = 0.1;
  PrivacyBudget budget;  // template; each client runs its own copy
  std::uint64_t seed = 0;
};

inline void validate_generator_config(const GeneratorConfig& c) {
  if (c.iterations < 1)
    throw config_error("generator config: iterations must be >= 1");
  if (c.population < 1)
    throw config_error("generator config: population must be >= 1");
  if (c.survivors < 1 || c.survivors > c.population)
    throw config_error("generator config: survivors must lie in [1, population]");
  if (c.variation_scale < 0.0)
    throw config_error("generator config: variation_scale must be >= 0");
}

// Trace of one evolution run, for inspection in ablations.
struct PeTrace {
  std::vector<std::vector<Tensor>> populations;
  std::vector<std::vector<double>> histograms;
  std::vector<std::vector<std::size_t>> survivor_indices;
};

using ReleaseFn = std::function<std::vector<double>(const std::vector<Tensor>&)>;

namespace detail {

// Image-like features ([C,H,W]) start uniform in [0,1] and stay clamped there
// under variation; flat features start standard normal, unclamped.
inline Tensor pe_random_candidate(const std::vector<int>& shape, bool image_like,
                                  Rng& rng) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.data)
    v = static_cast<float>(image_like ? rng.uniform() : rng.normal());
  return t;
}

inline Tensor pe_vary(const Tensor& t, double scale, bool image_like, Rng& rng) {
  Tensor out = t;
  for (auto& v : out.data) {
    double nv = static_cast<double>(v) + rng.normal(0.0, scale);
    if (image_like) nv = std::clamp(nv, 0.0, 1.0);
    v = static_cast<float>(nv);
  }
  return out;
}

}  // namespace detail

// Core evolution loop, decoupled from the private data: every round proposes a
// population (initially random, later survivors plus variations), hands it to
// `release` for a noisy histogram, and keeps the top-S bins (ties to lowest
// index). The returned tensors are variations of survivors of the final round.
// Private data can influence the output only through `release` results.
inline std::vector<Tensor> pe_evolve(const std::vector<int>& feature_shape,
                                     bool image_like, int count,
                                     const GeneratorConfig& config, Rng& rng,
                                     const ReleaseFn& release,
                                     PeTrace* trace = nullptr) {
  validate_generator_config(config);
  if (count < 0) throw domain_error("pe_evolve: negative count");
  const int P = config.population;
  const int S = config.survivors;
  std::vector<Tensor> population;
  population.reserve(P);
  for (int j = 0; j < P; ++j)
    population.push_back(detail::pe_random_candidate(feature_shape, image_like, rng));
  std::vector<Tensor> survivors;
  for (int it = 0; it < config.iterations; ++it) {
    if (trace) trace->populations.push_back(population);
    const std::vector<double> hist = release(population);
    if (static_cast<int>(hist.size()) != P)
      throw protocol_error("pe_evolve: histogram size does not match population");
    std::vector<std::size_t> order(P);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return hist[a] > hist[b]; });
    order.resize(S);
    if (trace) {
      trace->histograms.push_back(hist);
      trace->survivor_indices.push_back(order);
    }
    survivors.clear();
    for (auto idx : order) survivors.push_back(population[idx]);
    if (it + 1 < config.iterations) {
      std::vector<Tensor> next = survivors;
      while (static_cast<int>(next.size()) < P)
        next.push_back(detail::pe_vary(survivors[rng.uniform_index(S)],
                                       config.variation_scale, image_like, rng));
      population = std::move(next);
    }
  }
  std::vector<Tensor> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i)
    out.push_back(detail::pe_vary(survivors[rng.uniform_index(survivors.size())],
                                  config.variation_scale, image_like, rng));
  return out;
}

// Synthetic examples of class c evolved against the client's private examples
// of that class. Generation and histogram noise run on separate streams
// derived from `seed`, so a frozen histogram playback through pe_evolve with
// the generation stream reproduces the output bit for bit.
// Refuses to start unless the ledger admits all config.iterations releases.
inline LabeledDataset pe_generate(const LabeledDataset& private_set, int c,
                                  int count, const GeneratorConfig& config,
                                  PrivacyBudget& budget, std::uint64_t seed,
                                  std::vector<std::vector<double>>* released = nullptr,
                                  PeTrace* trace = nullptr) {
  validate_generator_config(config);
  if (count < 0) throw domain_error("pe_generate: negative count");
  LabeledDataset class_ds;
  class_ds.num_classes = private_set.num_classes;
  for (const auto& e : private_set.examples)
    if (e.label == c) class_ds.examples.push_back(e);
  if (class_ds.empty())
    throw domain_error("pe_generate: no private examples of class " +
                       std::to_string(c));
  if (budget.remaining() < config.iterations)
    throw privacy_error("pe_generate: budget admits only " +
                        std::to_string(budget.remaining()) + " of " +
                        std::to_string(config.iterations) + " queries");
  const std::vector<int>& shape = class_ds.examples.front().features.shape;
  const bool image_like = shape.size() == 3;
  Rng gen_rng(derive_seed(seed, Stream::Generate, 1));
  Rng noise_rng(derive_seed(seed, Stream::Generate, 2));
  ReleaseFn release = [&](const std::vector<Tensor>& pop) {
    auto h = dp_nn_histogram(class_ds, pop, budget.sigma, budget, noise_rng);
    if (released) released->push_back(h);
    return h;
  };
  auto tensors = pe_evolve(shape, image_like, count, config, gen_rng, release, trace);
  LabeledDataset out;
  out.num_classes = private_set.num_classes;
  for (auto& t : tensors) {
    LabeledExample e;
    e.features = std::move(t);
    e.label = c;
    e.provenance = Provenance::Synthetic;
    out.examples.push_back(std::move(e));
  }
  return out;
}

// Controlled-experiment generator: samples real held-out examples of class c
// and relabels them Synthetic, keeping the origin id in source_id so
// disjointness from training partitions stays checkable.
inline LabeledDataset oracle_generate(const LabeledDataset& heldout, int c,
                                      int count, Rng& rng,
                                      bool with_replacement = false) {
  if (count < 0) throw domain_error("oracle_generate: negative count");
  std::vector<int> idx;
  for (int i = 0; i < static_cast<int>(heldout.examples.size()); ++i)
    if (heldout.examples[i].label == c) idx.push_back(i);
  if (idx.empty())
    throw domain_error("oracle_generate: held-out set has no examples of class " +
                       std::to_string(c));
  LabeledDataset out;
  out.num_classes = heldout.num_classes;
  auto emit = [&](int i) {
    LabeledExample e;
    e.features = heldout.examples[i].features;
    e.label = c;
    e.source_id = heldout.examples[i].id;
    e.provenance = Provenance::Synthetic;
    out.examples.push_back(std::move(e));
  };
  if (with_replacement) {
    for (int n = 0; n < count; ++n) emit(idx[rng.uniform_index(idx.size())]);
  } else {
    if (static_cast<std::size_t>(count) > idx.size())
      throw domain_error("oracle_generate: requested " + std::to_string(count) +
                         " examples of class " + std::to_string(c) +
                         " but held-out set has " + std::to_string(idx.size()));
    rng.shuffle(idx);
    for (int n = 0; n < count; ++n) emit(idx[n]);
  }
  return out;
}

// What a client tells the server: per-class example counts. The held-class
// set is derivable from the positive entries.
struct LabelCountReport {
  int client_id = -1;
  std::vector<std::int64_t> counts;

  std::vector<int> held_classes() const {
    std::vector<int> held;
    for (int k = 0; k < static_cast<int>(counts.size()); ++k)
      if (counts[k] > 0) held.push_back(k);
    return held;
  }
};

struct SharePolicy {
  double max_class_fraction = 0.5;
  // 0 disables generation entirely (empty pool); the default fits the
  // held-out volume left by the default holdout fraction without replacement
  int samples_per_shared_class = 200;
};

inline void validate_share_policy(const SharePolicy& p) {
  if (!(p.max_class_fraction > 0.0 && p.max_class_fraction <= 1.0))
    throw config_error("share policy: max_class_fraction must lie in (0,1]");
  if (p.samples_per_shared_class < 0)
    throw config_error("share policy: samples_per_shared_class must be >= 0");
}

inline int max_shareable_classes(int held_class_count, const SharePolicy& p) {
  return static_cast<int>(
      std::ceil(p.max_class_fraction * static_cast<double>(held_class_count)));
}

// Picks ceil(max_class_fraction * held) of the client's classes, uniformly
// without replacement; returned sorted ascending.
inline std::vector<int> select_shareable_classes(const LabelCountReport& report,
                                                 const SharePolicy& policy,
                                                 Rng& rng) {
  validate_share_policy(policy);
  std::vector<int> held = report.held_classes();
  if (held.empty())
    throw protocol_error("select_shareable_classes: report has no positive counts");
  const std::size_t want = static_cast<std::size_t>(
      max_shareable_classes(static_cast<int>(held.size()), policy));
  if (want >= held.size()) return held;
  rng.shuffle(held);
  held.resize(want);
  std::sort(held.begin(), held.end());
  return held;
}

}  // namespace fedsim
