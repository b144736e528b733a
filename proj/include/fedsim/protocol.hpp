#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "fedsim/config.hpp"
#include "fedsim/dataset.hpp"
#include "fedsim/dp.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/nn.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

struct GlobalModelState {
  int round = 0;  // rounds completed
  ModelParams weights;
};

// Clients report per-class counts; the server sees counts, synthetic data, and
// model weights, never raw training examples.
inline std::vector<LabelCountReport> collect_label_counts(
    const std::vector<LabeledDataset>& clients) {
  std::vector<LabelCountReport> reports;
  reports.reserve(clients.size());
  for (int i = 0; i < static_cast<int>(clients.size()); ++i) {
    if (clients[i].empty())
      throw protocol_error("client " + std::to_string(i) + " has no data");
    LabelCountReport r;
    r.client_id = i;
    r.counts = clients[i].class_counts();
    reports.push_back(std::move(r));
  }
  return reports;
}

struct PoolEntry {
  LabeledExample example;
  int contributor = -1;
};

struct GlobalSyntheticPool {
  int num_classes = 0;
  std::vector<std::vector<PoolEntry>> by_class;

  std::vector<std::int64_t> class_counts() const {
    std::vector<std::int64_t> counts(num_classes, 0);
    for (int k = 0; k < num_classes; ++k)
      counts[k] = static_cast<std::int64_t>(by_class[k].size());
    return counts;
  }

  bool empty() const {
    for (const auto& v : by_class)
      if (!v.empty()) return false;
    return true;
  }
};

// Assembles the server-side pool from per-client contributions. Enforces the
// share cap against each client's report, requires Synthetic provenance, and
// box-downsamples oversized image contributions to expected_shape.
inline GlobalSyntheticPool build_global_pool(
    const std::vector<LabeledDataset>& contributions,
    const std::vector<LabelCountReport>& reports, const SharePolicy& policy,
    const std::vector<int>& expected_shape) {
  validate_share_policy(policy);
  if (contributions.size() != reports.size())
    throw protocol_error("build_global_pool: contributions and reports disagree");
  GlobalSyntheticPool pool;
  for (int i = 0; i < static_cast<int>(contributions.size()); ++i) {
    const auto& contrib = contributions[i];
    if (contrib.empty()) continue;
    if (pool.num_classes == 0) {
      pool.num_classes = contrib.num_classes;
      pool.by_class.resize(pool.num_classes);
    } else if (contrib.num_classes != pool.num_classes) {
      throw protocol_error("build_global_pool: client " + std::to_string(i) +
                           " contributed " + std::to_string(contrib.num_classes) +
                           "-class data to a " + std::to_string(pool.num_classes) +
                           "-class pool");
    }
    const auto held = reports[i].held_classes();
    const int cap = max_shareable_classes(static_cast<int>(held.size()), policy);
    std::vector<bool> contributed(pool.num_classes, false);
    for (const auto& e : contrib.examples) {
      if (e.provenance != Provenance::Synthetic)
        throw protocol_error("build_global_pool: client " + std::to_string(i) +
                             " contributed a Real-provenance example");
      if (std::find(held.begin(), held.end(), e.label) == held.end())
        throw protocol_error("build_global_pool: client " + std::to_string(i) +
                             " contributed class " + std::to_string(e.label) +
                             " it does not hold");
      contributed[e.label] = true;
      PoolEntry entry;
      entry.contributor = i;
      entry.example = e;
      if (expected_shape.size() == 3 && e.features.shape.size() == 3 &&
          (e.features.shape[1] > expected_shape[1] ||
           e.features.shape[2] > expected_shape[2]))
        entry.example.features =
            resize_image(e.features, expected_shape[1], expected_shape[2]);
      require_shape(entry.example.features, expected_shape, "build_global_pool");
      pool.by_class[e.label].push_back(std::move(entry));
    }
    const int n_contributed = static_cast<int>(
        std::count(contributed.begin(), contributed.end(), true));
    if (n_contributed > cap)
      throw protocol_error("build_global_pool: client " + std::to_string(i) +
                           " contributed " + std::to_string(n_contributed) +
                           " classes, cap is " + std::to_string(cap));
  }
  if (pool.num_classes == 0 && !reports.empty()) {
    pool.num_classes = static_cast<int>(reports.front().counts.size());
    pool.by_class.resize(pool.num_classes);
  }
  return pool;
}

// Per-client class->count assignment. A client is eligible for class c when
// its local count is at or below the deficiency threshold, the pool has c, and
// the client did not contribute c. Availability divides equally among eligible
// clients, remainder to the lowest ids; then the per-class quota caps each.
inline std::vector<std::vector<std::int64_t>> plan_distribution(
    const GlobalSyntheticPool& pool, const std::vector<LabelCountReport>& reports,
    std::int64_t per_class_quota, std::int64_t deficiency_threshold) {
  if (per_class_quota < 0)
    throw domain_error("plan_distribution: negative quota");
  const int N = static_cast<int>(reports.size());
  const int K = pool.num_classes;
  std::vector<std::vector<std::int64_t>> assignment(
      N, std::vector<std::int64_t>(std::max(K, 0), 0));
  for (int c = 0; c < K; ++c) {
    const std::int64_t avail = static_cast<std::int64_t>(pool.by_class[c].size());
    if (avail == 0) continue;
    std::vector<bool> contributed(N, false);
    for (const auto& entry : pool.by_class[c]) contributed[entry.contributor] = true;
    std::vector<int> eligible;
    for (int i = 0; i < N; ++i) {
      if (contributed[i]) continue;
      const std::int64_t have =
          c < static_cast<int>(reports[i].counts.size()) ? reports[i].counts[c] : 0;
      if (have <= deficiency_threshold) eligible.push_back(i);
    }
    if (eligible.empty()) continue;
    const std::int64_t m = static_cast<std::int64_t>(eligible.size());
    const std::int64_t base = avail / m;
    const std::int64_t rem = avail % m;
    for (std::int64_t p = 0; p < m; ++p) {
      const std::int64_t share = base + (p < rem ? 1 : 0);
      assignment[eligible[p]][c] = std::min(per_class_quota, share);
    }
  }
  return assignment;
}

// Walks each class list once across all recipients so no pool example is
// handed to two clients.
struct PoolCursor {
  std::vector<std::size_t> next;

  static PoolCursor start(const GlobalSyntheticPool& pool) {
    PoolCursor c;
    c.next.assign(std::max(pool.num_classes, 0), 0);
    return c;
  }
};

inline LabeledDataset augment(const LabeledDataset& local,
                              const std::vector<std::int64_t>& assignment,
                              const GlobalSyntheticPool& pool, PoolCursor& cursor) {
  LabeledDataset out = local;
  for (int c = 0; c < pool.num_classes; ++c) {
    const std::int64_t want = c < static_cast<int>(assignment.size()) ? assignment[c] : 0;
    if (want == 0) continue;
    if (cursor.next[c] + static_cast<std::size_t>(want) > pool.by_class[c].size())
      throw protocol_error("augment: assignment of " + std::to_string(want) +
                           " examples of class " + std::to_string(c) +
                           " exceeds pool availability");
    for (std::int64_t n = 0; n < want; ++n)
      out.examples.push_back(pool.by_class[c][cursor.next[c]++].example);
  }
  return out;
}

// E epochs of mini-batch SGD from the broadcast weights; per-epoch order from
// the caller's stream. FedProx anchors the proximal term at the broadcast
// weights for the whole local run.
inline ModelParams local_train(const ModelParams& broadcast,
                               const LabeledDataset& data,
                               const ExperimentConfig& config, Rng& rng) {
  if (data.empty()) throw protocol_error("local_train: empty client dataset");
  const LossConfig loss = config.algorithm == Algorithm::FedProx
                              ? LossConfig::proximal(config.mu, broadcast)
                              : LossConfig::nll();
  ModelParams w = broadcast;
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> batch_idx;
  for (int epoch = 0; epoch < config.local_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      batch_idx.assign(order.begin() + start, order.begin() + end);
      Tensor features;
      std::vector<int> labels;
      batch_of(data, batch_idx, features, labels);
      const ModelParams grads = backward(w, features, labels, loss);
      w = sgd_step(w, grads, config.lr);
    }
  }
  return w;
}

struct ClientUpdate {
  int client_id = -1;
  std::int64_t num_examples = 0;
  ModelParams weights;
};

// Mean of client weights, elementwise, accumulated in double in ascending
// client-id order so permuting the input cannot change the result.
// Unweighted by default; weighted divides by total example count instead.
inline ModelParams aggregate(const std::vector<ClientUpdate>& updates,
                             bool weighted = false) {
  if (updates.empty()) throw protocol_error("aggregate: no client updates");
  std::vector<const ClientUpdate*> ordered;
  ordered.reserve(updates.size());
  for (const auto& u : updates) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) {
              return a->client_id < b->client_id;
            });
  for (std::size_t i = 1; i < ordered.size(); ++i) {
    if (ordered[i]->client_id == ordered[i - 1]->client_id)
      throw protocol_error("aggregate: duplicate client id " +
                           std::to_string(ordered[i]->client_id));
  }
  const ModelParams& first = ordered.front()->weights;
  for (const auto* u : ordered) {
    try {
      require_same_schema(first, u->weights, "aggregate");
    } catch (const Error& e) {
      throw protocol_error(e.what());
    }
  }
  double total_weight = 0.0;
  for (const auto* u : ordered) {
    if (weighted && u->num_examples <= 0)
      throw protocol_error("aggregate: weighted mean needs positive example counts");
    total_weight += weighted ? static_cast<double>(u->num_examples) : 1.0;
  }
  ModelParams out;
  out.arch = first.arch;
  out.layers.reserve(first.layers.size());
  std::vector<double> acc;
  for (std::size_t l = 0; l < first.layers.size(); ++l) {
    const std::size_t n = first.layers[l].value.size();
    acc.assign(n, 0.0);
    for (const auto* u : ordered) {
      const double wgt = weighted ? static_cast<double>(u->num_examples) : 1.0;
      const auto& v = u->weights.layers[l].value.data;
      for (std::size_t i = 0; i < n; ++i)
        acc[i] += wgt * static_cast<double>(v[i]);
    }
    Tensor t = Tensor::zeros(first.layers[l].value.shape);
    for (std::size_t i = 0; i < n; ++i)
      t.data[i] = static_cast<float>(acc[i] / total_weight);
    require_finite(t, "aggregate");
    out.layers.push_back({first.layers[l].name, std::move(t)});
  }
  return out;
}

// Everything run_experiment fixes before round 1: the per-client datasets and
// the held-out reserve feeding the oracle generator. The held-out split is
// applied whenever the config's generator is HeldOutOracle, independent of the
// algorithm, so baselines train on the same partitions as DPSDA-FL.
struct PreparedData {
  std::vector<LabeledDataset> clients;
  LabeledDataset heldout;
};

inline PreparedData prepare_client_data(const ExperimentConfig& config,
                                        const LabeledDataset& train,
                                        std::uint64_t seed) {
  PreparedData out;
  const LabeledDataset* assignable = &train;
  HoldoutSplit split;
  if (config.generator.kind == GeneratorKind::HeldOutOracle &&
      config.holdout_fraction > 0.0) {
    split = split_holdout(train, config.holdout_fraction,
                          derive_seed(seed, Stream::Holdout));
    out.heldout = std::move(split.heldout);
    assignable = &split.assignable;
  } else {
    out.heldout.num_classes = train.num_classes;
  }
  PartitionSpec spec = config.partition;
  spec.n_clients = config.n_clients;
  spec.seed = derive_seed(seed, Stream::Partition);
  out.clients = partition(*assignable, spec);
  return out;
}

struct Contributions {
  std::vector<LabeledDataset> datasets;  // one per client
  std::vector<PrivacyBudget> budgets;    // final ledgers; untouched for oracle
};

// Each client picks its shareable classes (50% cap by default) and generates
// synthetic data for them, one dedicated stream per (client, class). Returns
// one contribution dataset per client, classes in ascending order.
inline Contributions generate_contributions(
    const ExperimentConfig& config, const std::vector<LabeledDataset>& clients,
    const LabeledDataset& heldout, const std::vector<LabelCountReport>& reports,
    std::uint64_t seed, std::ostream* log = nullptr) {
  Contributions out;
  auto& contributions = out.datasets;
  contributions.resize(clients.size());
  out.budgets.resize(clients.size());
  for (int i = 0; i < static_cast<int>(clients.size()); ++i) {
    contributions[i].num_classes = clients[i].num_classes;
    if (config.share.samples_per_shared_class == 0) continue;
    Rng share_rng(derive_seed(seed, Stream::ShareSelect,
                              static_cast<std::uint64_t>(i)));
    const auto shared = select_shareable_classes(reports[i], config.share, share_rng);
    PrivacyBudget budget;
    if (config.generator.kind == GeneratorKind::PrivateEvolutionLite) {
      const int total_queries =
          config.generator.iterations * static_cast<int>(shared.size());
      budget = PrivacyBudget::calibrated(config.generator.budget.epsilon,
                                         config.generator.budget.delta, 1.0,
                                         total_queries);
      if (log && budget.delta_too_large_for(clients[i].size()))
        *log << "warning: client " << i << " delta " << budget.delta
             << " is not below 1/" << clients[i].size() << "\n";
    }
    for (int c : shared) {
      const std::uint64_t gen_seed =
          derive_seed(seed, Stream::Generate, static_cast<std::uint64_t>(i),
                      static_cast<std::uint64_t>(c));
      LabeledDataset syn;
      if (config.generator.kind == GeneratorKind::HeldOutOracle) {
        Rng gen_rng(gen_seed);
        syn = oracle_generate(heldout, c, config.share.samples_per_shared_class,
                              gen_rng, config.generator_with_replacement);
      } else {
        syn = pe_generate(clients[i], c, config.share.samples_per_shared_class,
                          config.generator, budget, gen_seed);
      }
      for (auto& e : syn.examples)
        contributions[i].examples.push_back(std::move(e));
    }
    out.budgets[i] = budget;
  }
  return out;
}

// Distribution plan applied in ascending client order against a shared cursor,
// so every pool example reaches at most one client.
inline void distribute_and_augment(const ExperimentConfig& config,
                                   const GlobalSyntheticPool& pool,
                                   const std::vector<LabelCountReport>& reports,
                                   std::vector<LabeledDataset>& clients) {
  const auto assignment = plan_distribution(pool, reports, config.per_class_quota,
                                            config.deficiency_threshold);
  PoolCursor cursor = PoolCursor::start(pool);
  for (int i = 0; i < static_cast<int>(clients.size()); ++i)
    clients[i] = augment(clients[i], assignment[i], pool, cursor);
}

// Steps before the round loop: reports, per-client generation of shareable
// classes, pool assembly, deficiency-targeted distribution, augmentation.
// Mutates `clients` in place; returns the pool for inspection.
inline GlobalSyntheticPool dpsda_prephase(const ExperimentConfig& config,
                                          std::vector<LabeledDataset>& clients,
                                          const LabeledDataset& heldout,
                                          std::uint64_t seed,
                                          std::ostream* log = nullptr) {
  const auto reports = collect_label_counts(clients);
  const std::vector<int> expected_shape =
      clients.front().examples.front().features.shape;
  const auto contributions =
      generate_contributions(config, clients, heldout, reports, seed, log);
  GlobalSyntheticPool pool = build_global_pool(contributions.datasets, reports,
                                               config.share, expected_shape);
  distribute_and_augment(config, pool, reports, clients);
  if (log) {
    *log << "pool per-class counts:";
    for (auto c : pool.class_counts()) *log << " " << c;
    *log << "\n";
  }
  return pool;
}

// The T-round loop: broadcast -> local training on every client -> unweighted
// aggregate, per-client per-round streams derived from (seed, client, round).
// Evaluation runs when `test` is given; `on_round` sees every aggregated model
// (checkpointing hook). The weight sequence depends on neither.
inline std::vector<RoundLog> federated_rounds(
    const ExperimentConfig& config, const std::vector<LabeledDataset>& clients,
    const LabeledDataset* test, std::uint64_t seed,
    const std::function<void(int, const ModelParams&)>& on_round = {},
    std::ostream* log = nullptr) {
  const Architecture arch = resolve_architecture(config);
  ModelParams w = init_params(arch, seed);
  std::vector<RoundLog> logs;
  logs.reserve(config.rounds);
  for (int t = 1; t <= config.rounds; ++t) {
    std::vector<ClientUpdate> updates;
    updates.reserve(config.n_clients);
    for (int i = 0; i < config.n_clients; ++i) {
      Rng rng(derive_seed(seed, Stream::Train, static_cast<std::uint64_t>(i),
                          static_cast<std::uint64_t>(t)));
      try {
        ClientUpdate u;
        u.client_id = i;
        u.num_examples = static_cast<std::int64_t>(clients[i].size());
        u.weights = local_train(w, clients[i], config, rng);
        updates.push_back(std::move(u));
      } catch (const Error& e) {
        throw Error(e.kind(), "round " + std::to_string(t) + " client " +
                                  std::to_string(i) + ": " + e.what());
      }
    }
    w = aggregate(updates, config.weighted_aggregation);
    if (on_round) on_round(t, w);
    if (test) {
      RoundLog rl = evaluate(w, *test);
      rl.round = t;
      logs.push_back(std::move(rl));
      if (log)
        *log << "round " << t << " accuracy "
             << format_percent(logs.back().top1_accuracy) << "\n";
    }
  }
  return logs;
}

// One full run at one seed: optional synthetic pre-phase, then T rounds of
// broadcast -> local training on every client -> aggregate -> evaluate.
inline std::vector<RoundLog> run_experiment(const ExperimentConfig& config,
                                            const LabeledDataset& train,
                                            const LabeledDataset& test,
                                            std::uint64_t seed,
                                            std::ostream* log = nullptr) {
  validate_experiment_config(config);
  validate_dataset(train, "run_experiment train");
  validate_dataset(test, "run_experiment test");

  PreparedData prepared = prepare_client_data(config, train, seed);
  if (config.algorithm == Algorithm::DPSDA_FL)
    dpsda_prephase(config, prepared.clients, prepared.heldout, seed, log);

  return federated_rounds(config, prepared.clients, &test, seed, {}, log);
}

// Builds the train/test pair described by the config. CIFAR-10 loading is the
// caller's job (directory resolution lives at the CLI layer).
struct ToyData {
  LabeledDataset train;
  LabeledDataset test;
};

inline ToyData make_toy_data(const DataConfig& d) {
  ToyData out;
  out.train = make_toy_dataset(d.toy_classes, d.toy_per_class, d.toy_feature_dim,
                               d.toy_separation, d.toy_seed);
  out.test = make_toy_dataset(d.toy_classes, d.toy_test_per_class,
                              d.toy_feature_dim, d.toy_separation,
                              derive_seed(d.toy_seed, Stream::ToyData, 999));
  return out;
}

}  // namespace fedsim
