#include <fedsim/dataset.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include <fedsim/errors.hpp>
#include <fedsim/metrics.hpp>
#include <fedsim/nn.hpp>
#include <fedsim/rng.hpp>

namespace {

namespace fs = std::filesystem;
using fedsim::Error;
using fedsim::ErrorKind;
using fedsim::LabeledDataset;
using fedsim::PartitionKind;
using fedsim::PartitionSpec;
using fedsim::Provenance;
using fedsim::Rng;
using fedsim::Tensor;

// ---------------------------------------------------------------------------
// Toy dataset

TEST(ToyData, CountsIdsAndDeterminism) {
  const LabeledDataset ds = fedsim::make_toy_dataset(4, 25, 8, 2.0, 11);
  EXPECT_EQ(ds.size(), 100u);
  EXPECT_EQ(ds.num_classes, 4);
  const auto counts = ds.class_counts();
  for (int k = 0; k < 4; ++k) EXPECT_EQ(counts[k], 25);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(ds.examples[i].id, i);
    EXPECT_EQ(ds.examples[i].provenance, Provenance::Real);
    EXPECT_EQ(ds.examples[i].features.shape, (std::vector<int>{8}));
  }
  const LabeledDataset again = fedsim::make_toy_dataset(4, 25, 8, 2.0, 11);
  for (int i = 0; i < 100; ++i)
    EXPECT_EQ(ds.examples[i].features.data, again.examples[i].features.data);
  const LabeledDataset other = fedsim::make_toy_dataset(4, 25, 8, 2.0, 12);
  EXPECT_NE(ds.examples[0].features.data, other.examples[0].features.data);
}

TEST(ToyData, ClusterMeansSitOnTheirAxes) {
  const int K = 3, F = 5, n = 2000;
  const LabeledDataset ds = fedsim::make_toy_dataset(K, n, F, 4.0, 3);
  for (int k = 0; k < K; ++k) {
    std::vector<double> mean(F, 0.0);
    for (const auto& e : ds.examples) {
      if (e.label != k) continue;
      for (int f = 0; f < F; ++f) mean[f] += e.features.data[f];
    }
    for (int f = 0; f < F; ++f) mean[f] /= n;
    const double want = 4.0 * (1.0 + static_cast<double>(k) / F);
    for (int f = 0; f < F; ++f)
      EXPECT_NEAR(mean[f], f == k % F ? want : 0.0, 0.1) << "k=" << k;
  }
}

TEST(ToyData, ZeroSeparationTrainsToChanceAccuracy) {
  // With all clusters collapsed the labels carry no signal, so a trained
  // classifier must land near 1/K accuracy.
  const int K = 4;
  const LabeledDataset train = fedsim::make_toy_dataset(K, 150, 8, 0.0, 1);
  const LabeledDataset test = fedsim::make_toy_dataset(K, 100, 8, 0.0, 2);
  fedsim::ModelParams model =
      fedsim::init_params(fedsim::Architecture::toy_mlp(8, 16, K), 5);
  const auto cfg = fedsim::LossConfig::nll();
  for (int epoch = 0; epoch < 3; ++epoch) {
    for (std::size_t start = 0; start < train.size(); start += 32) {
      std::vector<int> idx;
      for (std::size_t i = start; i < std::min(train.size(), start + 32); ++i)
        idx.push_back(static_cast<int>(i));
      Tensor bx;
      std::vector<int> by;
      fedsim::batch_of(train, idx, bx, by);
      model = fedsim::sgd_step(model, fedsim::backward(model, bx, by, cfg), 0.1);
    }
  }
  const fedsim::RoundLog log = fedsim::evaluate(model, test);
  EXPECT_GE(log.top1_accuracy, 1.0 / K - 0.05);
  EXPECT_LE(log.top1_accuracy, 1.0 / K + 0.10);
}

TEST(ToyData, RejectsDegenerateArguments) {
  EXPECT_THROW(fedsim::make_toy_dataset(1, 10, 4, 1.0, 0), Error);
  EXPECT_THROW(fedsim::make_toy_dataset(3, 0, 4, 1.0, 0), Error);
  EXPECT_THROW(fedsim::make_toy_dataset(3, 10, 0, 1.0, 0), Error);
}

// ---------------------------------------------------------------------------
// Holdout split

TEST(Holdout, StratifiedCountsAndDisjointIds) {
  const LabeledDataset ds = fedsim::make_toy_dataset(5, 300, 6, 1.0, 4);
  const auto split = fedsim::split_holdout(ds, 0.6667, 9);
  const auto held = split.heldout.class_counts();
  const auto kept = split.assignable.class_counts();
  for (int k = 0; k < 5; ++k) {
    EXPECT_EQ(held[k], 200);  // llround(0.6667 * 300)
    EXPECT_EQ(kept[k], 100);
  }
  std::set<std::int64_t> ids;
  for (const auto& e : split.heldout.examples) ids.insert(e.id);
  for (const auto& e : split.assignable.examples)
    EXPECT_FALSE(ids.count(e.id)) << "example in both halves";
  EXPECT_EQ(split.heldout.size() + split.assignable.size(), ds.size());
}

TEST(Holdout, ZeroFractionKeepsEverything) {
  const LabeledDataset ds = fedsim::make_toy_dataset(3, 20, 4, 1.0, 4);
  const auto split = fedsim::split_holdout(ds, 0.0, 9);
  EXPECT_TRUE(split.heldout.empty());
  EXPECT_EQ(split.assignable.size(), ds.size());
}

TEST(Holdout, RejectsOutOfRangeFraction) {
  const LabeledDataset ds = fedsim::make_toy_dataset(3, 20, 4, 1.0, 4);
  EXPECT_THROW(fedsim::split_holdout(ds, 1.0, 0), Error);
  EXPECT_THROW(fedsim::split_holdout(ds, -0.1, 0), Error);
}

TEST(Holdout, Deterministic) {
  const LabeledDataset ds = fedsim::make_toy_dataset(3, 50, 4, 1.0, 4);
  const auto a = fedsim::split_holdout(ds, 0.4, 21);
  const auto b = fedsim::split_holdout(ds, 0.4, 21);
  ASSERT_EQ(a.heldout.size(), b.heldout.size());
  for (std::size_t i = 0; i < a.heldout.size(); ++i)
    EXPECT_EQ(a.heldout.examples[i].id, b.heldout.examples[i].id);
}

// ---------------------------------------------------------------------------
// Partitioning

std::multiset<std::int64_t> id_multiset(const std::vector<LabeledDataset>& parts) {
  std::multiset<std::int64_t> ids;
  for (const auto& p : parts)
    for (const auto& e : p.examples) ids.insert(e.id);
  return ids;
}

TEST(Partition, IidConservesExamplesAndBalancesClasses) {
  const LabeledDataset ds = fedsim::make_toy_dataset(6, 101, 4, 1.0, 8);
  PartitionSpec spec;
  spec.kind = PartitionKind::IID;
  spec.n_clients = 4;
  spec.seed = 3;
  const auto parts = fedsim::partition(ds, spec);
  ASSERT_EQ(parts.size(), 4u);

  std::multiset<std::int64_t> want;
  for (const auto& e : ds.examples) want.insert(e.id);
  EXPECT_EQ(id_multiset(parts), want);

  // 101 examples of each class over 4 clients: every client gets 25 or 26.
  for (const auto& p : parts)
    for (auto c : p.class_counts()) EXPECT_TRUE(c == 25 || c == 26) << c;
}

TEST(Partition, LabelSkewCardinalityAndPerfectCover) {
  const LabeledDataset ds = fedsim::make_toy_dataset(10, 30, 4, 1.0, 8);
  PartitionSpec spec;
  spec.kind = PartitionKind::LabelSkew;
  spec.n_clients = 5;
  spec.classes_per_client = 2;
  spec.seed = 17;
  const auto parts = fedsim::partition(ds, spec);

  // 5 clients x 2 classes covers all 10 classes exactly once, so the whole
  // dataset is conserved and every client sees exactly its two classes.
  std::multiset<std::int64_t> want;
  for (const auto& e : ds.examples) want.insert(e.id);
  EXPECT_EQ(id_multiset(parts), want);
  std::set<int> covered;
  for (const auto& p : parts) {
    EXPECT_EQ(p.distinct_classes(), 2);
    EXPECT_EQ(p.size(), 60u);
    for (auto c : p.class_counts())
      EXPECT_TRUE(c == 0 || c == 30);
    for (int k = 0; k < 10; ++k)
      if (p.class_counts()[k] > 0) covered.insert(k);
  }
  EXPECT_EQ(covered.size(), 10u);
}

TEST(Partition, LabelSkewSplitsSharedClassesEvenly) {
  // 3 clients x 2 classes over K=4: 6 slots, so 2 classes get 2 holders. A
  // multi-holder class's examples split evenly, remainder to the lower id.
  const LabeledDataset ds = fedsim::make_toy_dataset(4, 31, 4, 1.0, 8);
  PartitionSpec spec;
  spec.kind = PartitionKind::LabelSkew;
  spec.n_clients = 3;
  spec.classes_per_client = 2;
  spec.seed = 5;
  const auto parts = fedsim::partition(ds, spec);
  const auto held = fedsim::label_skew_assignment(4, spec);

  std::map<int, std::vector<int>> holders;
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(held[i].size(), 2u);
    for (int c : held[i]) holders[c].push_back(i);
  }
  std::multiset<std::int64_t> want;
  for (const auto& e : ds.examples) want.insert(e.id);
  EXPECT_EQ(id_multiset(parts), want);
  for (const auto& [c, hs] : holders) {
    std::vector<std::int64_t> counts;
    for (int h : hs) counts.push_back(parts[h].class_counts()[c]);
    if (hs.size() == 2) {
      // 31 examples split 16/15 with the extra one on the lower client id.
      EXPECT_EQ(counts[0], 16);
      EXPECT_EQ(counts[1], 15);
    } else {
      EXPECT_EQ(counts[0], 31);
    }
  }
}

TEST(Partition, QuantitySkewHandCase) {
  const LabeledDataset ds = fedsim::make_toy_dataset(2, 10, 4, 1.0, 8);
  PartitionSpec spec;
  spec.kind = PartitionKind::QuantitySkew;
  spec.n_clients = 3;
  spec.quantity_weights = {0.5, 0.3, 0.2};
  spec.seed = 3;
  const auto parts = fedsim::partition(ds, spec);
  // Each class has 10 examples: 5 / 3 / 2 per client, stratified per class.
  for (int k = 0; k < 2; ++k) {
    EXPECT_EQ(parts[0].class_counts()[k], 5);
    EXPECT_EQ(parts[1].class_counts()[k], 3);
    EXPECT_EQ(parts[2].class_counts()[k], 2);
  }
  std::multiset<std::int64_t> want;
  for (const auto& e : ds.examples) want.insert(e.id);
  EXPECT_EQ(id_multiset(parts), want);
}

TEST(Partition, QuantitySkewWithoutWeightsIsUniform) {
  const LabeledDataset ds = fedsim::make_toy_dataset(2, 12, 4, 1.0, 8);
  PartitionSpec spec;
  spec.kind = PartitionKind::QuantitySkew;
  spec.n_clients = 4;
  spec.seed = 3;
  const auto parts = fedsim::partition(ds, spec);
  for (const auto& p : parts) EXPECT_EQ(p.size(), 6u);
}

TEST(Partition, RandomSpecsKeepInvariants) {
  // Property sweep: whatever the spec, no example is duplicated, examples only
  // move (never mutate), and LabelSkew clients hold exactly classes_per_client
  // distinct classes.
  Rng meta(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const int K = 2 + static_cast<int>(meta.uniform_index(9));
    const int per_class = 5 + static_cast<int>(meta.uniform_index(40));
    const LabeledDataset ds =
        fedsim::make_toy_dataset(K, per_class, 3, 1.0, 1000 + trial);
    PartitionSpec spec;
    spec.n_clients = 1 + static_cast<int>(meta.uniform_index(6));
    spec.seed = meta.next_u64();
    const int kind = static_cast<int>(meta.uniform_index(3));
    spec.kind = static_cast<PartitionKind>(kind);
    if (spec.kind == PartitionKind::LabelSkew)
      spec.classes_per_client = 1 + static_cast<int>(meta.uniform_index(K));
    const auto parts = fedsim::partition(ds, spec);
    ASSERT_EQ(parts.size(), static_cast<std::size_t>(spec.n_clients));

    std::set<std::int64_t> seen;
    std::size_t total = 0;
    for (const auto& p : parts) {
      for (const auto& e : p.examples) {
        EXPECT_TRUE(seen.insert(e.id).second) << "duplicated id " << e.id;
        // Moved, not mutated: identical payload to the source example.
        const auto& src = ds.examples[static_cast<std::size_t>(e.id)];
        EXPECT_EQ(e.label, src.label);
        EXPECT_EQ(e.features.data, src.features.data);
      }
      total += p.size();
      if (spec.kind == PartitionKind::LabelSkew && !p.examples.empty())
        EXPECT_EQ(p.distinct_classes(), spec.classes_per_client);
    }
    if (spec.kind != PartitionKind::LabelSkew)
      EXPECT_EQ(total, ds.size());
    else
      EXPECT_LE(total, ds.size());  // unassigned classes are dropped
  }
}

TEST(Partition, Deterministic) {
  const LabeledDataset ds = fedsim::make_toy_dataset(6, 40, 4, 1.0, 8);
  PartitionSpec spec;
  spec.kind = PartitionKind::LabelSkew;
  spec.n_clients = 3;
  spec.classes_per_client = 3;
  spec.seed = 77;
  const auto a = fedsim::partition(ds, spec);
  const auto b = fedsim::partition(ds, spec);
  for (int i = 0; i < 3; ++i) {
    ASSERT_EQ(a[i].size(), b[i].size());
    for (std::size_t j = 0; j < a[i].size(); ++j)
      EXPECT_EQ(a[i].examples[j].id, b[i].examples[j].id);
  }
}

TEST(Partition, RejectsInfeasibleSpecs) {
  const LabeledDataset ds = fedsim::make_toy_dataset(4, 10, 4, 1.0, 8);
  PartitionSpec spec;
  spec.kind = PartitionKind::LabelSkew;
  spec.n_clients = 2;
  spec.classes_per_client = 5;  // more than K=4
  EXPECT_THROW(fedsim::partition(ds, spec), Error);

  PartitionSpec q;
  q.kind = PartitionKind::QuantitySkew;
  q.n_clients = 2;
  q.quantity_weights = {0.5, 0.4};  // sums to 0.9
  EXPECT_THROW(fedsim::partition(ds, q), Error);
  q.quantity_weights = {0.5, 0.3, 0.2};  // wrong arity
  EXPECT_THROW(fedsim::partition(ds, q), Error);

  PartitionSpec bad;
  bad.n_clients = 0;
  EXPECT_THROW(fedsim::partition(ds, bad), Error);
  try {
    fedsim::partition(ds, bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
  }
}

// ---------------------------------------------------------------------------
// Image resize

TEST(Resize, ConstantImageStaysConstant) {
  Tensor img = Tensor::zeros({3, 64, 64});
  for (auto& v : img.data) v = 0.5f;
  const Tensor out = fedsim::resize_image(img, 32, 32);
  ASSERT_EQ(out.shape, (std::vector<int>{3, 32, 32}));
  for (float v : out.data) EXPECT_FLOAT_EQ(v, 0.5f);
}

TEST(Resize, TwoByTwoAverage) {
  Tensor img = Tensor::zeros({1, 2, 2});
  img.data = {0.0f, 1.0f, 1.0f, 0.0f};
  const Tensor out = fedsim::resize_image(img, 1, 1);
  EXPECT_FLOAT_EQ(out.data[0], 0.5f);
}

TEST(Resize, MeanConservedOnIntegerRatio) {
  Rng rng(12);
  Tensor img = Tensor::zeros({3, 64, 64});
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  const Tensor out = fedsim::resize_image(img, 32, 32);
  double min = 0.0, mout = 0.0;
  for (float v : img.data) min += v;
  for (float v : out.data) mout += v;
  EXPECT_NEAR(min / img.size(), mout / out.size(), 1e-6);
}

TEST(Resize, MeanConservedOnFractionalRatio) {
  Rng rng(13);
  Tensor img = Tensor::zeros({1, 3, 3});
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  const Tensor out = fedsim::resize_image(img, 2, 2);
  double min = 0.0, mout = 0.0;
  for (float v : img.data) min += v;
  for (float v : out.data) mout += v;
  EXPECT_NEAR(min / img.size(), mout / out.size(), 1e-6);
}

TEST(Resize, SameSizeIsIdentity) {
  Rng rng(14);
  Tensor img = Tensor::zeros({2, 4, 4});
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  const Tensor out = fedsim::resize_image(img, 4, 4);
  EXPECT_EQ(out.data, img.data);
}

TEST(Resize, RejectsUpscaleAndBadArguments) {
  const Tensor img = Tensor::zeros({1, 4, 4});
  EXPECT_THROW(fedsim::resize_image(img, 8, 4), Error);
  EXPECT_THROW(fedsim::resize_image(img, 0, 2), Error);
  EXPECT_THROW(fedsim::resize_image(Tensor::zeros({4, 4}), 2, 2), Error);
}

// ---------------------------------------------------------------------------
// CIFAR-10 ingestion, against synthetic batch files with known bytes

class CifarFiles : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::path(::testing::TempDir()) / "cifar_fake";
    fs::create_directories(dir_);
    for (int b = 1; b <= 5; ++b)
      write_batch(dir_ / ("data_batch_" + std::to_string(b) + ".bin"), b);
    write_batch(dir_ / "test_batch.bin", 6);
  }

  void TearDown() override { fs::remove_all(dir_); }

  // Record r: label r % 10, pixel i holds byte (r + i) % 256.
  static void write_batch(const fs::path& path, int salt) {
    std::vector<unsigned char> buf;
    buf.reserve(10000 * 3073);
    for (int r = 0; r < 10000; ++r) {
      buf.push_back(static_cast<unsigned char>(r % 10));
      for (int i = 0; i < 3072; ++i)
        buf.push_back(static_cast<unsigned char>((r + i + salt) % 256));
    }
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  }

  fs::path dir_;
};

TEST_F(CifarFiles, LoadsCountsAndFirstRecordBytes) {
  const fedsim::Cifar10 data = fedsim::load_cifar10(dir_);
  EXPECT_EQ(data.train.size(), 50000u);
  EXPECT_EQ(data.test.size(), 10000u);
  for (auto c : data.train.class_counts()) EXPECT_EQ(c, 5000);
  for (auto c : data.test.class_counts()) EXPECT_EQ(c, 1000);

  // First record of data_batch_1 (salt 1): label 0, pixel i = (i+1) % 256.
  const auto& e0 = data.train.examples[0];
  EXPECT_EQ(e0.label, 0);
  EXPECT_EQ(e0.id, 0);
  ASSERT_EQ(e0.features.shape, (std::vector<int>{3, 32, 32}));
  for (int i = 0; i < 3072; ++i)
    ASSERT_EQ(e0.features.data[i], static_cast<float>((i + 1) % 256) / 255.0f);

  // ids continue across files; test ids follow train ids.
  EXPECT_EQ(data.train.examples.back().id, 49999);
  EXPECT_EQ(data.test.examples.front().id, 50000);
}

TEST_F(CifarFiles, TruncatedFileRaisesIngestionErrorWithOffset) {
  fs::resize_file(dir_ / "test_batch.bin", 3073 * 100 + 50);
  try {
    fedsim::load_cifar10(dir_);
    FAIL() << "expected ingestion error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Ingestion);
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }
}

TEST_F(CifarFiles, BadLabelByteRaisesIngestionError) {
  std::fstream f(dir_ / "data_batch_3.bin",
                 std::ios::binary | std::ios::in | std::ios::out);
  f.seekp(3073 * 7);
  const char bad = 17;
  f.write(&bad, 1);
  f.close();
  try {
    fedsim::load_cifar10(dir_);
    FAIL() << "expected ingestion error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Ingestion);
  }
}

TEST_F(CifarFiles, MissingFileRaisesIngestionError) {
  fs::remove(dir_ / "data_batch_2.bin");
  EXPECT_THROW(fedsim::load_cifar10(dir_), Error);
}

}  // namespace
