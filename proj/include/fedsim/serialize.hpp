#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsim/dataset.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/nn.hpp"
#include "fedsim/protocol.hpp"

namespace fedsim {

// All binary formats are little-endian with a 4-byte magic and a version byte.
static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

constexpr std::uint8_t kFormatVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in)
    throw ingestion_error("truncated file " + path.string() + " at offset " +
                          std::to_string(static_cast<long long>(in.tellg())));
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in,
                               const std::filesystem::path& path) {
  const auto n = read_pod<std::uint32_t>(in, path);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw ingestion_error("truncated string in " + path.string());
  return s;
}

inline void check_magic(std::istream& in, const char* magic,
                        const std::filesystem::path& path) {
  char buf[4];
  in.read(buf, 4);
  if (!in || std::memcmp(buf, magic, 4) != 0)
    throw ingestion_error("bad magic in " + path.string() + " (expected " +
                          magic + ")");
  const auto version = read_pod<std::uint8_t>(in, path);
  if (version != kFormatVersion)
    throw ingestion_error("unsupported format version " +
                          std::to_string(version) + " in " + path.string());
}

inline void write_tensor_payload(std::ostream& out, const Tensor& t) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
  for (int d : t.shape) write_pod<std::int32_t>(out, d);
  out.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

inline Tensor read_tensor_payload(std::istream& in,
                                  const std::filesystem::path& path) {
  const auto ndim = read_pod<std::uint32_t>(in, path);
  if (ndim > 8) throw ingestion_error("implausible tensor rank in " + path.string());
  std::vector<int> shape(ndim);
  for (auto& d : shape) {
    d = read_pod<std::int32_t>(in, path);
    if (d < 0) throw ingestion_error("negative dimension in " + path.string());
  }
  Tensor t = Tensor::zeros(shape);
  in.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!in) throw ingestion_error("truncated tensor in " + path.string());
  return t;
}

}  // namespace detail

// Writes via a temp file in the same directory, then renames into place.
inline void atomic_write(const std::filesystem::path& path,
                         const std::function<void(std::ostream&)>& writer) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ingestion_error("cannot write " + tmp.string());
    writer(out);
    out.flush();
    if (!out) throw ingestion_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    throw ingestion_error("cannot rename " + tmp.string() + " to " +
                          path.string() + ": " + ec.message());
}

// ---- model weights ("FSMP") ----

inline void save_model(const std::filesystem::path& path, const ModelParams& m) {
  atomic_write(path, [&](std::ostream& out) {
    out.write("FSMP", 4);
    detail::write_pod<std::uint8_t>(out, kFormatVersion);
    detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(m.arch));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(m.layers.size()));
    for (const auto& l : m.layers) {
      detail::write_string(out, l.name);
      detail::write_tensor_payload(out, l.value);
    }
  });
}

inline ModelParams load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ingestion_error("cannot open " + path.string());
  detail::check_magic(in, "FSMP", path);
  ModelParams m;
  m.arch = static_cast<ArchitectureId>(detail::read_pod<std::uint8_t>(in, path));
  const auto n = detail::read_pod<std::uint32_t>(in, path);
  m.layers.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    LayerParam l;
    l.name = detail::read_string(in, path);
    l.value = detail::read_tensor_payload(in, path);
    m.layers.push_back(std::move(l));
  }
  validate_schema(m);
  return m;
}

// ---- labeled datasets ("FSDS", columnar) ----

inline void save_dataset(const std::filesystem::path& path,
                         const LabeledDataset& ds,
                         const std::string& metadata_json = "") {
  validate_dataset(ds, "save_dataset");
  atomic_write(path, [&](std::ostream& out) {
    out.write("FSDS", 4);
    detail::write_pod<std::uint8_t>(out, kFormatVersion);
    detail::write_pod<std::int32_t>(out, ds.num_classes);
    detail::write_pod<std::uint64_t>(out, ds.examples.size());
    detail::write_string(out, metadata_json);
    const std::vector<int> shape =
        ds.examples.empty() ? std::vector<int>{} : ds.examples.front().features.shape;
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) detail::write_pod<std::int32_t>(out, d);
    for (const auto& e : ds.examples) detail::write_pod<std::int32_t>(out, e.label);
    for (const auto& e : ds.examples) detail::write_pod<std::int64_t>(out, e.id);
    for (const auto& e : ds.examples) detail::write_pod<std::int64_t>(out, e.source_id);
    for (const auto& e : ds.examples)
      detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(e.provenance));
    for (const auto& e : ds.examples)
      out.write(reinterpret_cast<const char*>(e.features.data.data()),
                static_cast<std::streamsize>(e.features.data.size() * sizeof(float)));
  });
}

struct LoadedDataset {
  LabeledDataset dataset;
  std::string metadata_json;
};

inline LoadedDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ingestion_error("cannot open " + path.string());
  detail::check_magic(in, "FSDS", path);
  LoadedDataset out;
  out.dataset.num_classes = detail::read_pod<std::int32_t>(in, path);
  const auto n = detail::read_pod<std::uint64_t>(in, path);
  out.metadata_json = detail::read_string(in, path);
  const auto ndim = detail::read_pod<std::uint32_t>(in, path);
  if (ndim > 8) throw ingestion_error("implausible feature rank in " + path.string());
  std::vector<int> shape(ndim);
  for (auto& d : shape) d = detail::read_pod<std::int32_t>(in, path);
  out.dataset.examples.resize(n);
  for (auto& e : out.dataset.examples)
    e.label = detail::read_pod<std::int32_t>(in, path);
  for (auto& e : out.dataset.examples)
    e.id = detail::read_pod<std::int64_t>(in, path);
  for (auto& e : out.dataset.examples)
    e.source_id = detail::read_pod<std::int64_t>(in, path);
  for (auto& e : out.dataset.examples)
    e.provenance =
        static_cast<Provenance>(detail::read_pod<std::uint8_t>(in, path));
  for (auto& e : out.dataset.examples) {
    e.features = Tensor::zeros(shape);
    in.read(reinterpret_cast<char*>(e.features.data.data()),
            static_cast<std::streamsize>(e.features.data.size() * sizeof(float)));
    if (!in) throw ingestion_error("truncated features in " + path.string());
  }
  validate_dataset(out.dataset, "load_dataset");
  return out;
}

// ---- synthetic pool ("FSPL") ----

inline void save_pool(const std::filesystem::path& path,
                      const GlobalSyntheticPool& pool) {
  atomic_write(path, [&](std::ostream& out) {
    out.write("FSPL", 4);
    detail::write_pod<std::uint8_t>(out, kFormatVersion);
    detail::write_pod<std::int32_t>(out, pool.num_classes);
    std::vector<int> shape;
    for (const auto& cls : pool.by_class)
      if (!cls.empty()) {
        shape = cls.front().example.features.shape;
        break;
      }
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) detail::write_pod<std::int32_t>(out, d);
    for (int c = 0; c < pool.num_classes; ++c) {
      detail::write_pod<std::uint64_t>(out, pool.by_class[c].size());
      for (const auto& entry : pool.by_class[c]) {
        detail::write_pod<std::int32_t>(out, entry.contributor);
        detail::write_pod<std::int32_t>(out, entry.example.label);
        detail::write_pod<std::int64_t>(out, entry.example.id);
        detail::write_pod<std::int64_t>(out, entry.example.source_id);
        detail::write_pod<std::uint8_t>(
            out, static_cast<std::uint8_t>(entry.example.provenance));
        out.write(reinterpret_cast<const char*>(entry.example.features.data.data()),
                  static_cast<std::streamsize>(entry.example.features.data.size() *
                                               sizeof(float)));
      }
    }
  });
}

inline GlobalSyntheticPool load_pool(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ingestion_error("cannot open " + path.string());
  detail::check_magic(in, "FSPL", path);
  GlobalSyntheticPool pool;
  pool.num_classes = detail::read_pod<std::int32_t>(in, path);
  if (pool.num_classes < 0)
    throw ingestion_error("negative class count in " + path.string());
  const auto ndim = detail::read_pod<std::uint32_t>(in, path);
  if (ndim > 8) throw ingestion_error("implausible feature rank in " + path.string());
  std::vector<int> shape(ndim);
  for (auto& d : shape) d = detail::read_pod<std::int32_t>(in, path);
  pool.by_class.resize(pool.num_classes);
  for (int c = 0; c < pool.num_classes; ++c) {
    const auto n = detail::read_pod<std::uint64_t>(in, path);
    pool.by_class[c].resize(n);
    for (auto& entry : pool.by_class[c]) {
      entry.contributor = detail::read_pod<std::int32_t>(in, path);
      entry.example.label = detail::read_pod<std::int32_t>(in, path);
      entry.example.id = detail::read_pod<std::int64_t>(in, path);
      entry.example.source_id = detail::read_pod<std::int64_t>(in, path);
      entry.example.provenance =
          static_cast<Provenance>(detail::read_pod<std::uint8_t>(in, path));
      entry.example.features = Tensor::zeros(shape);
      in.read(reinterpret_cast<char*>(entry.example.features.data.data()),
              static_cast<std::streamsize>(entry.example.features.data.size() *
                                           sizeof(float)));
      if (!in) throw ingestion_error("truncated pool entry in " + path.string());
    }
  }
  return pool;
}

// ---- round logs (JSON lines) ----

inline nlohmann::json round_log_to_json(const std::string& run_id,
                                        std::uint64_t seed, const RoundLog& log) {
  nlohmann::json j;
  j["run_id"] = run_id;
  j["seed"] = seed;
  j["round"] = log.round;
  j["accuracy"] = log.top1_accuracy;
  j["recall"] = log.per_class_recall;
  j["recall_defined"] = log.recall_defined;
  j["num_classes"] = log.confusion.num_classes;
  j["confusion"] = log.confusion.counts;
  return j;
}

inline RoundLog round_log_from_json(const nlohmann::json& j) {
  RoundLog log;
  log.round = j.at("round").get<int>();
  log.top1_accuracy = j.at("accuracy").get<double>();
  log.per_class_recall = j.at("recall").get<std::vector<double>>();
  log.recall_defined = j.at("recall_defined").get<std::vector<bool>>();
  log.confusion.num_classes = j.at("num_classes").get<int>();
  log.confusion.counts = j.at("confusion").get<std::vector<std::int64_t>>();
  validate_round_log(log);
  return log;
}

inline void save_round_logs(const std::filesystem::path& path,
                            const std::string& run_id, std::uint64_t seed,
                            const std::vector<RoundLog>& logs) {
  atomic_write(path, [&](std::ostream& out) {
    for (const auto& log : logs)
      out << round_log_to_json(run_id, seed, log).dump() << "\n";
  });
}

inline std::vector<RoundLog> load_round_logs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ingestion_error("cannot open " + path.string());
  std::vector<RoundLog> logs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      logs.push_back(round_log_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ingestion_error(path.string() + " line " + std::to_string(lineno) +
                            ": " + e.what());
    }
  }
  return logs;
}

}  // namespace fedsim
