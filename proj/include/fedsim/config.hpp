#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/dp.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/nn.hpp"

namespace fedsim {

enum class Algorithm : std::uint8_t { FedAvg = 0, FedProx = 1, DPSDA_FL = 2 };

enum class DatasetKind : std::uint8_t { Toy = 0, Cifar10 = 1 };

struct DataConfig {
  DatasetKind kind = DatasetKind::Toy;
  int toy_classes = 10;
  int toy_per_class = 300;
  // fewer axes than classes: clusters share coordinates at different radii,
  // so clients holding partial class sets learn genuinely conflicting models
  int toy_feature_dim = 4;
  double toy_separation = 3.0;
  int toy_test_per_class = 50;
  std::uint64_t toy_seed = 7;
  std::string cifar_dir;  // empty: use FEDSIM_DATA_DIR
};

struct ExperimentConfig {
  DataConfig data;
  std::string model = "toy_mlp";  // toy_mlp | paper_cnn
  int model_hidden_dim = 32;      // ToyMLP only
  Algorithm algorithm = Algorithm::FedAvg;
  double mu = 0.001;
  int n_clients = 5;
  int rounds = 20;
  int local_epochs = 2;
  double lr = 0.1;
  int batch_size = 32;
  bool weighted_aggregation = false;
  PartitionSpec partition{PartitionKind::LabelSkew, 5, 2, {}, 0};
  GeneratorConfig generator;
  bool generator_with_replacement = false;
  SharePolicy share;
  std::int64_t per_class_quota = 1000;
  std::int64_t deficiency_threshold = 0;
  double holdout_fraction = 0.6667;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc())
    throw numeric_error("config: cannot format double");
  return std::string(buf, p);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw config_error("config key " + key + ": not a number: '" + v + "'");
  }
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw config_error("config key " + key + ": not an integer: '" + v + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long i = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw config_error("config key " + key + ": not a nonnegative integer: '" +
                       v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw config_error("config key " + key + ": expected true/false: '" + v + "'");
}

inline std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(v);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

}  // namespace detail

// Lines of "key = value"; '#' starts a comment; blank lines ignored.
inline std::map<std::string, std::string> parse_config_text(std::istream& in) {
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("config line " + std::to_string(lineno) +
                         ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    if (key.empty())
      throw config_error("config line " + std::to_string(lineno) + ": empty key");
    out[key] = detail::trim(line.substr(eq + 1));
  }
  return out;
}

// "key=value" strings from the command line; these win over file entries.
inline void apply_overrides(std::map<std::string, std::string>& map,
                            const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0)
      throw config_error("override '" + o + "': expected key=value");
    map[detail::trim(o.substr(0, eq))] = detail::trim(o.substr(eq + 1));
  }
}

inline ExperimentConfig config_from_map(
    const std::map<std::string, std::string>& map) {
  ExperimentConfig c;
  using namespace detail;
  for (const auto& [key, v] : map) {
    if (key == "algorithm") {
      if (v == "fedavg") c.algorithm = Algorithm::FedAvg;
      else if (v == "fedprox") c.algorithm = Algorithm::FedProx;
      else if (v == "dpsda_fl") c.algorithm = Algorithm::DPSDA_FL;
      else throw config_error("config key algorithm: unknown value '" + v + "'");
    } else if (key == "batch_size") {
      c.batch_size = static_cast<int>(parse_int(key, v));
    } else if (key == "data.kind") {
      if (v == "toy") c.data.kind = DatasetKind::Toy;
      else if (v == "cifar10") c.data.kind = DatasetKind::Cifar10;
      else throw config_error("config key data.kind: unknown value '" + v + "'");
    } else if (key == "data.cifar_dir") {
      c.data.cifar_dir = v;
    } else if (key == "data.toy_classes") {
      c.data.toy_classes = static_cast<int>(parse_int(key, v));
    } else if (key == "data.toy_per_class") {
      c.data.toy_per_class = static_cast<int>(parse_int(key, v));
    } else if (key == "data.toy_feature_dim") {
      c.data.toy_feature_dim = static_cast<int>(parse_int(key, v));
    } else if (key == "data.toy_separation") {
      c.data.toy_separation = parse_double(key, v);
    } else if (key == "data.toy_test_per_class") {
      c.data.toy_test_per_class = static_cast<int>(parse_int(key, v));
    } else if (key == "data.toy_seed") {
      c.data.toy_seed = parse_uint(key, v);
    } else if (key == "deficiency_threshold") {
      c.deficiency_threshold = parse_int(key, v);
    } else if (key == "generator.kind") {
      if (v == "oracle") c.generator.kind = GeneratorKind::HeldOutOracle;
      else if (v == "pe") c.generator.kind = GeneratorKind::PrivateEvolutionLite;
      else throw config_error("config key generator.kind: unknown value '" + v + "'");
    } else if (key == "generator.iterations") {
      c.generator.iterations = static_cast<int>(parse_int(key, v));
    } else if (key == "generator.population") {
      c.generator.population = static_cast<int>(parse_int(key, v));
    } else if (key == "generator.survivors") {
      c.generator.survivors = static_cast<int>(parse_int(key, v));
    } else if (key == "generator.variation_scale") {
      c.generator.variation_scale = parse_double(key, v);
    } else if (key == "generator.epsilon") {
      c.generator.budget.epsilon = parse_double(key, v);
    } else if (key == "generator.delta") {
      c.generator.budget.delta = parse_double(key, v);
    } else if (key == "generator.with_replacement") {
      c.generator_with_replacement = parse_bool(key, v);
    } else if (key == "holdout_fraction") {
      c.holdout_fraction = parse_double(key, v);
    } else if (key == "lr") {
      c.lr = parse_double(key, v);
    } else if (key == "local_epochs") {
      c.local_epochs = static_cast<int>(parse_int(key, v));
    } else if (key == "model") {
      if (v != "toy_mlp" && v != "paper_cnn")
        throw config_error("config key model: unknown value '" + v + "'");
      c.model = v;
    } else if (key == "model.hidden_dim") {
      c.model_hidden_dim = static_cast<int>(parse_int(key, v));
    } else if (key == "mu") {
      c.mu = parse_double(key, v);
    } else if (key == "n_clients") {
      c.n_clients = static_cast<int>(parse_int(key, v));
      c.partition.n_clients = c.n_clients;
    } else if (key == "partition.kind") {
      if (v == "iid") c.partition.kind = PartitionKind::IID;
      else if (v == "label_skew") c.partition.kind = PartitionKind::LabelSkew;
      else if (v == "quantity_skew") c.partition.kind = PartitionKind::QuantitySkew;
      else throw config_error("config key partition.kind: unknown value '" + v + "'");
    } else if (key == "partition.classes_per_client") {
      c.partition.classes_per_client = static_cast<int>(parse_int(key, v));
    } else if (key == "partition.quantity_weights") {
      c.partition.quantity_weights.clear();
      for (const auto& w : split_commas(v))
        c.partition.quantity_weights.push_back(parse_double(key, w));
    } else if (key == "per_class_quota") {
      c.per_class_quota = parse_int(key, v);
    } else if (key == "rounds") {
      c.rounds = static_cast<int>(parse_int(key, v));
    } else if (key == "seeds") {
      c.seeds.clear();
      for (const auto& s : split_commas(v)) c.seeds.push_back(parse_uint(key, s));
      if (c.seeds.empty())
        throw config_error("config key seeds: need at least one seed");
    } else if (key == "share.max_class_fraction") {
      c.share.max_class_fraction = parse_double(key, v);
    } else if (key == "share.samples_per_shared_class") {
      c.share.samples_per_shared_class = static_cast<int>(parse_int(key, v));
    } else if (key == "weighted_aggregation") {
      c.weighted_aggregation = parse_bool(key, v);
    } else {
      throw config_error("unknown config key: " + key);
    }
  }
  c.partition.n_clients = c.n_clients;
  return c;
}

inline std::map<std::string, std::string> config_to_map(
    const ExperimentConfig& c) {
  using detail::format_double;
  std::map<std::string, std::string> m;
  m["algorithm"] = c.algorithm == Algorithm::FedAvg     ? "fedavg"
                   : c.algorithm == Algorithm::FedProx ? "fedprox"
                                                       : "dpsda_fl";
  m["batch_size"] = std::to_string(c.batch_size);
  m["data.kind"] = c.data.kind == DatasetKind::Toy ? "toy" : "cifar10";
  if (!c.data.cifar_dir.empty()) m["data.cifar_dir"] = c.data.cifar_dir;
  m["data.toy_classes"] = std::to_string(c.data.toy_classes);
  m["data.toy_per_class"] = std::to_string(c.data.toy_per_class);
  m["data.toy_feature_dim"] = std::to_string(c.data.toy_feature_dim);
  m["data.toy_separation"] = format_double(c.data.toy_separation);
  m["data.toy_test_per_class"] = std::to_string(c.data.toy_test_per_class);
  m["data.toy_seed"] = std::to_string(c.data.toy_seed);
  m["deficiency_threshold"] = std::to_string(c.deficiency_threshold);
  m["generator.kind"] = c.generator.kind == GeneratorKind::HeldOutOracle ? "oracle" : "pe";
  m["generator.iterations"] = std::to_string(c.generator.iterations);
  m["generator.population"] = std::to_string(c.generator.population);
  m["generator.survivors"] = std::to_string(c.generator.survivors);
  m["generator.variation_scale"] = format_double(c.generator.variation_scale);
  m["generator.epsilon"] = format_double(c.generator.budget.epsilon);
  m["generator.delta"] = format_double(c.generator.budget.delta);
  m["generator.with_replacement"] = c.generator_with_replacement ? "true" : "false";
  m["holdout_fraction"] = format_double(c.holdout_fraction);
  m["lr"] = format_double(c.lr);
  m["local_epochs"] = std::to_string(c.local_epochs);
  m["model"] = c.model;
  m["model.hidden_dim"] = std::to_string(c.model_hidden_dim);
  m["mu"] = format_double(c.mu);
  m["n_clients"] = std::to_string(c.n_clients);
  m["partition.kind"] = c.partition.kind == PartitionKind::IID ? "iid"
                        : c.partition.kind == PartitionKind::LabelSkew
                            ? "label_skew"
                            : "quantity_skew";
  m["partition.classes_per_client"] = std::to_string(c.partition.classes_per_client);
  if (!c.partition.quantity_weights.empty()) {
    std::string w;
    for (std::size_t i = 0; i < c.partition.quantity_weights.size(); ++i) {
      if (i) w += ",";
      w += format_double(c.partition.quantity_weights[i]);
    }
    m["partition.quantity_weights"] = w;
  }
  m["per_class_quota"] = std::to_string(c.per_class_quota);
  m["rounds"] = std::to_string(c.rounds);
  {
    std::string s;
    for (std::size_t i = 0; i < c.seeds.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(c.seeds[i]);
    }
    m["seeds"] = s;
  }
  m["share.max_class_fraction"] = format_double(c.share.max_class_fraction);
  m["share.samples_per_shared_class"] = std::to_string(c.share.samples_per_shared_class);
  m["weighted_aggregation"] = c.weighted_aggregation ? "true" : "false";
  return m;
}

// Canonical text: sorted keys, one per line. Stable input for hashing.
inline std::string config_to_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_to_map(c)) out += k + " = " + v + "\n";
  return out;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(config_to_text(c))));
  return std::string(buf);
}

inline void validate_experiment_config(const ExperimentConfig& c) {
  if (c.n_clients < 1) throw config_error("config: n_clients must be >= 1");
  if (c.rounds < 1) throw config_error("config: rounds must be >= 1");
  if (c.local_epochs < 0) throw config_error("config: local_epochs must be >= 0");
  if (c.lr < 0.0) throw config_error("config: lr must be >= 0");
  if (c.batch_size < 1) throw config_error("config: batch_size must be >= 1");
  if (c.mu < 0.0) throw config_error("config: mu must be >= 0");
  if (c.per_class_quota < 0) throw config_error("config: per_class_quota must be >= 0");
  if (c.deficiency_threshold < 0)
    throw config_error("config: deficiency_threshold must be >= 0");
  if (c.holdout_fraction < 0.0 || c.holdout_fraction >= 1.0)
    throw config_error("config: holdout_fraction must lie in [0,1)");
  if (c.seeds.empty()) throw config_error("config: need at least one seed");
  if (c.data.kind == DatasetKind::Cifar10 && c.model != "paper_cnn")
    throw config_error("config: cifar10 data requires model paper_cnn");
  if (c.data.kind == DatasetKind::Toy && c.model != "toy_mlp")
    throw config_error("config: toy data requires model toy_mlp");
  if (c.data.kind == DatasetKind::Toy) {
    if (c.data.toy_classes < 2) throw config_error("config: toy_classes must be >= 2");
    if (c.data.toy_per_class < 1) throw config_error("config: toy_per_class must be >= 1");
    if (c.data.toy_feature_dim < 1)
      throw config_error("config: toy_feature_dim must be >= 1");
    if (c.data.toy_test_per_class < 1)
      throw config_error("config: toy_test_per_class must be >= 1");
  }
  if (c.model == "toy_mlp" && c.model_hidden_dim < 1)
    throw config_error("config: model.hidden_dim must be >= 1");
  validate_share_policy(c.share);
  validate_generator_config(c.generator);
  PartitionSpec p = c.partition;
  p.n_clients = c.n_clients;
  const int K = c.data.kind == DatasetKind::Toy ? c.data.toy_classes : 10;
  validate_partition_spec(p, K);
}

inline int num_classes_of(const ExperimentConfig& c) {
  return c.data.kind == DatasetKind::Toy ? c.data.toy_classes : 10;
}

inline Architecture resolve_architecture(const ExperimentConfig& c) {
  if (c.model == "paper_cnn") return Architecture::paper_cnn();
  return Architecture::toy_mlp(c.data.toy_feature_dim, c.model_hidden_dim,
                               c.data.toy_classes);
}

}  // namespace fedsim
