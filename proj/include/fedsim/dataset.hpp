#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

enum class Provenance : std::uint8_t { Real = 0, Synthetic = 1 };

// id identifies the example within its experiment; synthetic examples carry
// id -1 and, when produced from a held-out original, that original's id in
// source_id (-1 when generated de novo).
struct LabeledExample {
  Tensor features;
  int label = 0;
  std::int64_t id = -1;
  std::int64_t source_id = -1;
  Provenance provenance = Provenance::Real;
};

struct LabeledDataset {
  std::vector<LabeledExample> examples;
  int num_classes = 0;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }

  std::vector<std::int64_t> class_counts() const {
    std::vector<std::int64_t> counts(num_classes, 0);
    for (const auto& e : examples) counts[e.label] += 1;
    return counts;
  }

  int distinct_classes() const {
    int n = 0;
    for (auto c : class_counts())
      if (c > 0) ++n;
    return n;
  }

  bool all_real() const {
    return std::all_of(examples.begin(), examples.end(), [](const auto& e) {
      return e.provenance == Provenance::Real;
    });
  }

  bool all_synthetic() const {
    return std::all_of(examples.begin(), examples.end(), [](const auto& e) {
      return e.provenance == Provenance::Synthetic;
    });
  }
};

inline void validate_dataset(const LabeledDataset& ds, const char* context) {
  if (ds.num_classes < 1)
    throw domain_error(std::string(context) + ": num_classes must be positive");
  for (const auto& e : ds.examples) {
    if (e.label < 0 || e.label >= ds.num_classes)
      throw domain_error(std::string(context) + ": label " +
                         std::to_string(e.label) + " outside [0," +
                         std::to_string(ds.num_classes) + ")");
    if (!ds.examples.empty() &&
        !e.features.shape_equals(ds.examples.front().features))
      throw domain_error(std::string(context) +
                         ": feature shapes not uniform within dataset");
  }
}

// Packs per-example features into a [B, ...] batch tensor plus a label vector.
inline void batch_of(const LabeledDataset& ds, const std::vector<int>& indices,
                     Tensor& features, std::vector<int>& labels) {
  if (indices.empty()) throw domain_error("batch_of: empty index list");
  const Tensor& first = ds.examples[indices[0]].features;
  std::vector<int> shape;
  shape.push_back(static_cast<int>(indices.size()));
  shape.insert(shape.end(), first.shape.begin(), first.shape.end());
  features = Tensor::zeros(shape);
  labels.resize(indices.size());
  const std::size_t stride = first.size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& e = ds.examples[indices[i]];
    std::copy(e.features.data.begin(), e.features.data.end(),
              features.data.begin() + i * stride);
    labels[i] = e.label;
  }
}

// K Gaussian clusters in R^F. Class k's mean puts separation*(1 + k/F) on
// coordinate (k mod F) so classes sharing a coordinate still differ in radius;
// unit isotropic noise around the mean. separation 0 collapses all clusters.
inline LabeledDataset make_toy_dataset(int num_classes, int per_class,
                                       int feature_dim, double separation,
                                       std::uint64_t seed) {
  if (num_classes < 2) throw domain_error("make_toy_dataset: need K >= 2");
  if (per_class < 1) throw domain_error("make_toy_dataset: need n >= 1");
  if (feature_dim < 1) throw domain_error("make_toy_dataset: need F >= 1");
  Rng rng(derive_seed(seed, Stream::ToyData));
  LabeledDataset ds;
  ds.num_classes = num_classes;
  ds.examples.reserve(static_cast<std::size_t>(num_classes) * per_class);
  std::int64_t next_id = 0;
  for (int k = 0; k < num_classes; ++k) {
    const int axis = k % feature_dim;
    const double mean =
        separation * (1.0 + static_cast<double>(k) / feature_dim);
    for (int i = 0; i < per_class; ++i) {
      LabeledExample e;
      e.features = Tensor::zeros({feature_dim});
      for (int f = 0; f < feature_dim; ++f) {
        double v = rng.normal();
        if (f == axis) v += mean;
        e.features.data[f] = static_cast<float>(v);
      }
      e.label = k;
      e.id = next_id++;
      ds.examples.push_back(std::move(e));
    }
  }
  return ds;
}

// Splits off a held-out set, stratified per class so every class keeps
// held-out examples available. llround keeps the per-class held count stable
// across platforms.
struct HoldoutSplit {
  LabeledDataset assignable;
  LabeledDataset heldout;
};

inline HoldoutSplit split_holdout(const LabeledDataset& ds,
                                  double holdout_fraction, std::uint64_t seed) {
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
    throw domain_error("split_holdout: fraction must lie in [0,1)");
  HoldoutSplit out;
  out.assignable.num_classes = ds.num_classes;
  out.heldout.num_classes = ds.num_classes;
  std::vector<std::vector<int>> by_class(ds.num_classes);
  for (int i = 0; i < static_cast<int>(ds.examples.size()); ++i)
    by_class[ds.examples[i].label].push_back(i);
  for (int k = 0; k < ds.num_classes; ++k) {
    auto idx = by_class[k];
    Rng rng(derive_seed(seed, Stream::Holdout, static_cast<std::uint64_t>(k)));
    rng.shuffle(idx);
    const std::size_t held = static_cast<std::size_t>(
        std::llround(holdout_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto& dst = i < held ? out.heldout : out.assignable;
      dst.examples.push_back(ds.examples[idx[i]]);
    }
  }
  return out;
}

enum class PartitionKind : std::uint8_t { IID = 0, LabelSkew = 1, QuantitySkew = 2 };

struct PartitionSpec {
  PartitionKind kind = PartitionKind::IID;
  int n_clients = 1;
  int classes_per_client = 0;            // LabelSkew only
  std::vector<double> quantity_weights;  // QuantitySkew only; empty = uniform
  std::uint64_t seed = 0;
};

inline void validate_partition_spec(const PartitionSpec& spec, int num_classes) {
  if (spec.n_clients < 1)
    throw config_error("partition spec: n_clients must be positive");
  if (spec.kind == PartitionKind::LabelSkew) {
    if (spec.classes_per_client < 1)
      throw config_error("partition spec: classes_per_client must be positive");
    if (spec.classes_per_client > num_classes)
      throw config_error("partition spec: classes_per_client " +
                         std::to_string(spec.classes_per_client) +
                         " exceeds class count " + std::to_string(num_classes));
  }
  if (spec.kind == PartitionKind::QuantitySkew && !spec.quantity_weights.empty()) {
    if (static_cast<int>(spec.quantity_weights.size()) != spec.n_clients)
      throw config_error("partition spec: quantity_weights size must equal n_clients");
    double sum = 0.0;
    for (double w : spec.quantity_weights) {
      if (w < 0.0) throw config_error("partition spec: negative quantity weight");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw config_error("partition spec: quantity_weights must sum to 1");
  }
}

namespace detail {

// Hands class k's examples to its holder clients: shuffled once, then split
// into near-equal chunks with the remainder going to the lowest client ids.
inline void deal_class_examples(const LabeledDataset& src,
                                const std::vector<int>& class_indices, int k,
                                const std::vector<int>& holders,
                                const std::vector<std::size_t>& counts,
                                std::uint64_t seed,
                                std::vector<LabeledDataset>& out) {
  auto idx = class_indices;
  Rng rng(derive_seed(seed, Stream::Partition,
                      1000 + static_cast<std::uint64_t>(k)));
  rng.shuffle(idx);
  std::size_t pos = 0;
  for (std::size_t h = 0; h < holders.size(); ++h) {
    for (std::size_t i = 0; i < counts[h]; ++i)
      out[holders[h]].examples.push_back(src.examples[idx[pos++]]);
  }
}

inline std::vector<std::size_t> even_split(std::size_t total, std::size_t parts) {
  std::vector<std::size_t> counts(parts, total / parts);
  for (std::size_t i = 0; i < total % parts; ++i) counts[i] += 1;
  return counts;
}

// Largest-remainder apportionment of `total` among weights; ties on the
// fractional part break toward the lowest index.
inline std::vector<std::size_t> largest_remainder(std::size_t total,
                                                  const std::vector<double>& w) {
  const std::size_t n = w.size();
  std::vector<std::size_t> counts(n);
  std::vector<double> frac(n);
  std::size_t used = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double target = w[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(target));
    frac[i] = target - std::floor(target);
    used += counts[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; i < total - used; ++i) counts[order[i % n]] += 1;
  return counts;
}

}  // namespace detail

// Class->client assignment for LabelSkew: classes shuffled once with the spec
// seed, then dealt round-robin (client 0..N-1 per pass) from the cyclic
// shuffled list, skipping classes a client already holds.
inline std::vector<std::vector<int>> label_skew_assignment(
    int num_classes, const PartitionSpec& spec) {
  std::vector<int> classes(num_classes);
  std::iota(classes.begin(), classes.end(), 0);
  Rng rng(derive_seed(spec.seed, Stream::Partition));
  rng.shuffle(classes);
  std::vector<std::vector<int>> held(spec.n_clients);
  std::size_t pos = 0;
  for (int pass = 0; pass < spec.classes_per_client; ++pass) {
    for (int i = 0; i < spec.n_clients; ++i) {
      std::size_t probes = 0;
      while (std::find(held[i].begin(), held[i].end(),
                       classes[pos % classes.size()]) != held[i].end()) {
        ++pos;
        if (++probes > classes.size())
          throw config_error("partition spec: infeasible LabelSkew assignment");
      }
      held[i].push_back(classes[pos % classes.size()]);
      ++pos;
    }
  }
  for (auto& h : held) std::sort(h.begin(), h.end());
  return held;
}

inline std::vector<LabeledDataset> partition(const LabeledDataset& ds,
                                             const PartitionSpec& spec) {
  validate_dataset(ds, "partition");
  validate_partition_spec(spec, ds.num_classes);
  const int N = spec.n_clients;
  const int K = ds.num_classes;
  std::vector<std::vector<int>> by_class(K);
  for (int i = 0; i < static_cast<int>(ds.examples.size()); ++i)
    by_class[ds.examples[i].label].push_back(i);

  std::vector<LabeledDataset> out(N);
  for (auto& d : out) d.num_classes = K;

  if (spec.kind == PartitionKind::LabelSkew) {
    const auto held = label_skew_assignment(K, spec);
    std::vector<std::vector<int>> holders(K);
    for (int i = 0; i < N; ++i)
      for (int c : held[i]) holders[c].push_back(i);
    for (int k = 0; k < K; ++k) {
      if (holders[k].empty()) continue;  // unassigned class, examples dropped
      const auto counts =
          detail::even_split(by_class[k].size(), holders[k].size());
      detail::deal_class_examples(ds, by_class[k], k, holders[k], counts,
                                  spec.seed, out);
    }
  } else {
    std::vector<int> all(N);
    std::iota(all.begin(), all.end(), 0);
    std::vector<double> weights = spec.quantity_weights;
    if (weights.empty())
      weights.assign(N, 1.0 / N);
    for (int k = 0; k < K; ++k) {
      const auto counts =
          spec.kind == PartitionKind::IID
              ? detail::even_split(by_class[k].size(), N)
              : detail::largest_remainder(by_class[k].size(), weights);
      detail::deal_class_examples(ds, by_class[k], k, all, counts, spec.seed,
                                  out);
    }
  }
  return out;
}

// Box (area-average) downsampling of a [C,H,W] image; each output pixel is the
// mean of its source rectangle, handling fractional overlap. Output stays in
// [0,1] because it is a convex combination of inputs in [0,1].
inline Tensor resize_image(const Tensor& img, int target_h, int target_w) {
  if (img.shape.size() != 3)
    throw domain_error("resize_image: expected [C,H,W], got " + img.shape_str());
  const int C = img.shape[0], H = img.shape[1], W = img.shape[2];
  if (target_h < 1 || target_w < 1)
    throw domain_error("resize_image: target must be positive");
  if (target_h > H || target_w > W)
    throw domain_error("resize_image: upscaling not supported (source " +
                       img.shape_str() + ")");
  if (target_h == H && target_w == W) return img;
  Tensor out = Tensor::zeros({C, target_h, target_w});
  const double sy = static_cast<double>(H) / target_h;
  const double sx = static_cast<double>(W) / target_w;
  for (int c = 0; c < C; ++c) {
    for (int oy = 0; oy < target_h; ++oy) {
      const double y0 = oy * sy, y1 = (oy + 1) * sy;
      for (int ox = 0; ox < target_w; ++ox) {
        const double x0 = ox * sx, x1 = (ox + 1) * sx;
        double acc = 0.0;
        for (int iy = static_cast<int>(std::floor(y0)); iy < H && iy < y1; ++iy) {
          const double hy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
          if (hy <= 0.0) continue;
          for (int ix = static_cast<int>(std::floor(x0)); ix < W && ix < x1; ++ix) {
            const double wx =
                std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
            if (wx <= 0.0) continue;
            acc += hy * wx *
                   img.data[(static_cast<std::size_t>(c) * H + iy) * W + ix];
          }
        }
        const double v = acc / (sy * sx);
        out.data[(static_cast<std::size_t>(c) * target_h + oy) * target_w + ox] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

namespace detail {

constexpr int kCifarRecordBytes = 3073;
constexpr int kCifarRecordsPerFile = 10000;
constexpr int kCifarPixels = 3072;

inline void load_cifar_file(const std::filesystem::path& path,
                            std::int64_t& next_id, LabeledDataset& out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ingestion_error("cannot open " + path.string());
  std::vector<unsigned char> record(kCifarRecordBytes);
  for (int r = 0; r < kCifarRecordsPerFile; ++r) {
    f.read(reinterpret_cast<char*>(record.data()), kCifarRecordBytes);
    if (f.gcount() != kCifarRecordBytes)
      throw ingestion_error("truncated file " + path.string() + " at offset " +
                            std::to_string(static_cast<long long>(r) *
                                           kCifarRecordBytes +
                                           f.gcount()));
    LabeledExample e;
    e.label = record[0];
    if (e.label > 9)
      throw ingestion_error("bad label byte " + std::to_string(e.label) +
                            " in " + path.string() + " record " +
                            std::to_string(r));
    e.features = Tensor::zeros({3, 32, 32});
    for (int i = 0; i < kCifarPixels; ++i)
      e.features.data[i] = static_cast<float>(record[1 + i]) / 255.0f;
    e.id = next_id++;
    out.examples.push_back(std::move(e));
  }
}

}  // namespace detail

struct Cifar10 {
  LabeledDataset train;
  LabeledDataset test;
};

// Standard binary CIFAR-10 layout: data_batch_{1..5}.bin + test_batch.bin,
// 10000 records each of 1 label byte + 3072 channel-major pixel bytes.
inline Cifar10 load_cifar10(const std::filesystem::path& dir) {
  Cifar10 out;
  out.train.num_classes = 10;
  out.test.num_classes = 10;
  std::int64_t next_id = 0;
  for (int b = 1; b <= 5; ++b)
    detail::load_cifar_file(dir / ("data_batch_" + std::to_string(b) + ".bin"),
                            next_id, out.train);
  detail::load_cifar_file(dir / "test_batch.bin", next_id, out.test);
  return out;
}

}  // namespace fedsim
