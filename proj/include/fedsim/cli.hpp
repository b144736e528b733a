#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "fedsim/config.hpp"
#include "fedsim/dataset.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/protocol.hpp"
#include "fedsim/serialize.hpp"

namespace fedsim {

namespace fs = std::filesystem;

inline std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::FedAvg: return "fedavg";
    case Algorithm::FedProx: return "fedprox";
    case Algorithm::DPSDA_FL: return "dpsda_fl";
  }
  throw domain_error("unknown algorithm");
}

// runs/<algo>-<confighash>/ holds the shared test set and per-seed dirs.
inline fs::path run_root(const fs::path& out_dir, const ExperimentConfig& c) {
  return out_dir / (algorithm_name(c.algorithm) + "-" + config_hash(c));
}

inline fs::path seed_dir(const fs::path& out_dir, const ExperimentConfig& c,
                         std::uint64_t seed) {
  return run_root(out_dir, c) / ("seed" + std::to_string(seed));
}

inline std::string run_id_of(const ExperimentConfig& c) {
  return algorithm_name(c.algorithm) + "-" + config_hash(c);
}

struct ExperimentData {
  LabeledDataset train;
  LabeledDataset test;
};

// Toy data is rebuilt from the config; CIFAR-10 comes from data.cifar_dir or,
// when that is empty, the FEDSIM_DATA_DIR environment variable.
inline ExperimentData load_experiment_data(const ExperimentConfig& c) {
  ExperimentData out;
  if (c.data.kind == DatasetKind::Toy) {
    ToyData toy = make_toy_data(c.data);
    out.train = std::move(toy.train);
    out.test = std::move(toy.test);
    return out;
  }
  std::string dir = c.data.cifar_dir;
  if (dir.empty()) {
    const char* env = std::getenv("FEDSIM_DATA_DIR");
    if (env) dir = env;
  }
  if (dir.empty())
    throw ingestion_error(
        "cifar10 selected but no directory given (set data.cifar_dir or "
        "FEDSIM_DATA_DIR)");
  Cifar10 c10 = load_cifar10(dir);
  out.train = std::move(c10.train);
  out.test = std::move(c10.test);
  return out;
}

// Writes per-seed client partitions, the held-out reserve, the shared test
// set, and a canonical config echo.
inline void cmd_partition(const ExperimentConfig& config, const fs::path& out_dir,
                          std::ostream* log = nullptr) {
  validate_experiment_config(config);
  const ExperimentData data = load_experiment_data(config);
  const fs::path root = run_root(out_dir, config);
  fs::create_directories(root);
  atomic_write(root / "config.txt",
               [&](std::ostream& o) { o << config_to_text(config); });
  save_dataset(root / "test.bin", data.test);
  for (std::uint64_t seed : config.seeds) {
    const fs::path dir = seed_dir(out_dir, config, seed);
    fs::create_directories(dir);
    PreparedData prepared = prepare_client_data(config, data.train, seed);
    for (int i = 0; i < config.n_clients; ++i)
      save_dataset(dir / ("client" + std::to_string(i) + ".bin"),
                   prepared.clients[i]);
    save_dataset(dir / "heldout.bin", prepared.heldout);
    if (log) *log << "partitioned seed " << seed << " into " << dir.string() << "\n";
  }
}

inline std::vector<LabeledDataset> load_clients(const ExperimentConfig& config,
                                                const fs::path& dir) {
  std::vector<LabeledDataset> clients;
  clients.reserve(config.n_clients);
  for (int i = 0; i < config.n_clients; ++i)
    clients.push_back(
        load_dataset(dir / ("client" + std::to_string(i) + ".bin")).dataset);
  return clients;
}

// Per-client synthetic contributions as contrib<i>.bin with a metadata record
// (client id, classes, generator kind, seed, budget spent). No-op for
// algorithms without a synthetic phase.
inline void cmd_generate(const ExperimentConfig& config, const fs::path& out_dir,
                         std::ostream* log = nullptr) {
  validate_experiment_config(config);
  if (config.algorithm != Algorithm::DPSDA_FL) {
    if (log) *log << "generate: nothing to do for "
                  << algorithm_name(config.algorithm) << "\n";
    return;
  }
  for (std::uint64_t seed : config.seeds) {
    const fs::path dir = seed_dir(out_dir, config, seed);
    const auto clients = load_clients(config, dir);
    const LabeledDataset heldout = load_dataset(dir / "heldout.bin").dataset;
    const auto reports = collect_label_counts(clients);
    const Contributions contrib =
        generate_contributions(config, clients, heldout, reports, seed, log);
    for (int i = 0; i < config.n_clients; ++i) {
      nlohmann::json meta;
      meta["client_id"] = i;
      meta["generator"] = config.generator.kind == GeneratorKind::HeldOutOracle
                              ? "oracle"
                              : "pe";
      meta["seed"] = seed;
      std::vector<int> classes;
      for (int k = 0; k < clients[i].num_classes; ++k)
        if (contrib.datasets[i].class_counts()[k] > 0) classes.push_back(k);
      meta["classes"] = classes;
      meta["queries_spent"] = contrib.budgets[i].queries_used;
      meta["epsilon"] = contrib.budgets[i].epsilon;
      meta["delta"] = contrib.budgets[i].delta;
      save_dataset(dir / ("contrib" + std::to_string(i) + ".bin"),
                   contrib.datasets[i], meta.dump());
    }
    if (log) *log << "generated contributions for seed " << seed << "\n";
  }
}

// Assembles and validates the global pool from the contribution files.
inline void cmd_pool(const ExperimentConfig& config, const fs::path& out_dir,
                     std::ostream* log = nullptr) {
  validate_experiment_config(config);
  if (config.algorithm != Algorithm::DPSDA_FL) {
    if (log) *log << "pool: nothing to do for "
                  << algorithm_name(config.algorithm) << "\n";
    return;
  }
  for (std::uint64_t seed : config.seeds) {
    const fs::path dir = seed_dir(out_dir, config, seed);
    const auto clients = load_clients(config, dir);
    const auto reports = collect_label_counts(clients);
    std::vector<LabeledDataset> contributions;
    contributions.reserve(config.n_clients);
    for (int i = 0; i < config.n_clients; ++i)
      contributions.push_back(
          load_dataset(dir / ("contrib" + std::to_string(i) + ".bin")).dataset);
    const GlobalSyntheticPool pool =
        build_global_pool(contributions, reports, config.share,
                          clients.front().examples.front().features.shape);
    save_pool(dir / "pool.bin", pool);
    if (log) *log << "pooled seed " << seed << "\n";
  }
}

// Runs the round loop, checkpointing the aggregated model each round.
inline void cmd_train(const ExperimentConfig& config, const fs::path& out_dir,
                      std::ostream* log = nullptr) {
  validate_experiment_config(config);
  for (std::uint64_t seed : config.seeds) {
    const fs::path dir = seed_dir(out_dir, config, seed);
    auto clients = load_clients(config, dir);
    if (config.algorithm == Algorithm::DPSDA_FL) {
      const auto reports = collect_label_counts(clients);
      const GlobalSyntheticPool pool = load_pool(dir / "pool.bin");
      distribute_and_augment(config, pool, reports, clients);
    }
    federated_rounds(config, clients, nullptr, seed,
                     [&](int t, const ModelParams& w) {
                       save_model(dir / ("round" + std::to_string(t) + ".bin"), w);
                     },
                     log);
    if (log) *log << "trained seed " << seed << " (" << config.rounds
                  << " checkpoints)\n";
  }
}

// Scores every checkpoint against the shared test set into rounds.jsonl.
inline void cmd_evaluate(const ExperimentConfig& config, const fs::path& out_dir,
                         std::ostream* log = nullptr) {
  validate_experiment_config(config);
  const LabeledDataset test =
      load_dataset(run_root(out_dir, config) / "test.bin").dataset;
  for (std::uint64_t seed : config.seeds) {
    const fs::path dir = seed_dir(out_dir, config, seed);
    std::vector<RoundLog> logs;
    logs.reserve(config.rounds);
    for (int t = 1; t <= config.rounds; ++t) {
      const ModelParams w = load_model(dir / ("round" + std::to_string(t) + ".bin"));
      RoundLog rl = evaluate(w, test);
      rl.round = t;
      logs.push_back(std::move(rl));
    }
    save_round_logs(dir / "rounds.jsonl", run_id_of(config), seed, logs);
    if (log) *log << "evaluated seed " << seed << ": final accuracy "
                  << format_percent(logs.back().top1_accuracy) << "\n";
  }
}

// Final-round logs across seeds -> summary row + confusion grid (counts of the
// final round summed over seeds, laid out true class x predicted class).
inline RunSummary cmd_report(const ExperimentConfig& config,
                             const fs::path& out_dir,
                             std::ostream* log = nullptr) {
  validate_experiment_config(config);
  const fs::path root = run_root(out_dir, config);
  std::vector<RoundLog> finals;
  for (std::uint64_t seed : config.seeds) {
    const auto logs = load_round_logs(seed_dir(out_dir, config, seed) / "rounds.jsonl");
    if (logs.empty())
      throw ingestion_error("no round logs for seed " + std::to_string(seed));
    finals.push_back(logs.back());
  }
  const RunSummary summary = summarize(finals);
  const int K = finals.front().confusion.num_classes;
  atomic_write(root / "summary.tsv", [&](std::ostream& o) {
    o << "approach\taugmentation\taccuracy";
    for (int c = 0; c < K; ++c) o << "\trecall_" << c;
    o << "\n";
    o << algorithm_name(config.algorithm) << "\t"
      << (config.algorithm == Algorithm::DPSDA_FL ? "yes" : "no") << "\t"
      << format_mean_std_percent(summary.mean_accuracy, summary.std_accuracy);
    for (int c = 0; c < K; ++c) o << "\t" << format_percent(summary.mean_recall[c]);
    o << "\n";
  });
  ConfusionMatrix grid = ConfusionMatrix::zeros(K);
  for (const auto& f : finals)
    for (std::size_t i = 0; i < grid.counts.size(); ++i)
      grid.counts[i] += f.confusion.counts[i];
  atomic_write(root / "confusion.txt", [&](std::ostream& o) {
    for (int t = 0; t < K; ++t) {
      for (int p = 0; p < K; ++p) o << (p ? "\t" : "") << grid.at(t, p);
      o << "\n";
    }
  });
  if (log) *log << run_id_of(config) << ": "
                << format_mean_std_percent(summary.mean_accuracy,
                                           summary.std_accuracy)
                << "\n";
  return summary;
}

// Full pipeline for FedAvg, FedProx, and DPSDA-FL over all seeds, plus a
// combined summary table.
inline void cmd_reproduce(const ExperimentConfig& config, const fs::path& out_dir,
                          std::ostream* log = nullptr) {
  validate_experiment_config(config);
  struct Row {
    ExperimentConfig cfg;
    RunSummary summary;
  };
  std::vector<Row> rows;
  for (Algorithm a : {Algorithm::FedAvg, Algorithm::FedProx, Algorithm::DPSDA_FL}) {
    ExperimentConfig cfg = config;
    cfg.algorithm = a;
    cmd_partition(cfg, out_dir, log);
    cmd_generate(cfg, out_dir, log);
    cmd_pool(cfg, out_dir, log);
    cmd_train(cfg, out_dir, log);
    cmd_evaluate(cfg, out_dir, log);
    rows.push_back({cfg, cmd_report(cfg, out_dir, log)});
  }
  const int K = static_cast<int>(rows.front().summary.mean_recall.size());
  atomic_write(out_dir / "summary.tsv", [&](std::ostream& o) {
    o << "approach\taugmentation\taccuracy";
    for (int c = 0; c < K; ++c) o << "\trecall_" << c;
    o << "\n";
    for (const auto& r : rows) {
      o << algorithm_name(r.cfg.algorithm) << "\t"
        << (r.cfg.algorithm == Algorithm::DPSDA_FL ? "yes" : "no") << "\t"
        << format_mean_std_percent(r.summary.mean_accuracy,
                                   r.summary.std_accuracy);
      for (int c = 0; c < K; ++c)
        o << "\t" << format_percent(r.summary.mean_recall[c]);
      o << "\n";
    }
  });
  if (log) *log << "summary written to " << (out_dir / "summary.tsv").string()
                << "\n";
}

}  // namespace fedsim
