#include <fedsim/serialize.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <fedsim/dataset.hpp>
#include <fedsim/errors.hpp>
#include <fedsim/metrics.hpp>
#include <fedsim/nn.hpp>

namespace {

namespace fs = std::filesystem;
using fedsim::Error;
using fedsim::ErrorKind;
using fedsim::LabeledDataset;
using fedsim::ModelParams;

class SerializeTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("fedsim_serialize_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path dir_;
};

void expect_bitwise_equal(const ModelParams& a, const ModelParams& b) {
  ASSERT_EQ(a.layers.size(), b.layers.size());
  EXPECT_EQ(a.arch, b.arch);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    EXPECT_EQ(a.layers[l].name, b.layers[l].name);
    EXPECT_EQ(a.layers[l].value.shape, b.layers[l].value.shape);
    EXPECT_EQ(a.layers[l].value.data, b.layers[l].value.data);
  }
}

TEST_F(SerializeTest, ModelRoundTripIsBitExact) {
  const ModelParams m =
      fedsim::init_params(fedsim::Architecture::toy_mlp(16, 32, 10), 5);
  const fs::path p = dir_ / "model.bin";
  fedsim::save_model(p, m);
  expect_bitwise_equal(m, fedsim::load_model(p));
  EXPECT_FALSE(fs::exists(dir_ / "model.bin.tmp"));
}

TEST_F(SerializeTest, CnnModelRoundTripIsBitExact) {
  const ModelParams m =
      fedsim::init_params(fedsim::Architecture::paper_cnn(), 5);
  const fs::path p = dir_ / "cnn.bin";
  fedsim::save_model(p, m);
  expect_bitwise_equal(m, fedsim::load_model(p));
}

TEST_F(SerializeTest, DatasetRoundTripKeepsEveryField) {
  LabeledDataset ds = fedsim::make_toy_dataset(4, 6, 5, 2.0, 3);
  ds.examples[2].provenance = fedsim::Provenance::Synthetic;
  ds.examples[2].source_id = 77;
  const fs::path p = dir_ / "data.bin";
  fedsim::save_dataset(p, ds, "{\"origin\":\"test\"}");
  const auto loaded = fedsim::load_dataset(p);
  EXPECT_EQ(loaded.metadata_json, "{\"origin\":\"test\"}");
  ASSERT_EQ(loaded.dataset.size(), ds.size());
  EXPECT_EQ(loaded.dataset.num_classes, 4);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& a = ds.examples[i];
    const auto& b = loaded.dataset.examples[i];
    EXPECT_EQ(a.label, b.label);
    EXPECT_EQ(a.id, b.id);
    EXPECT_EQ(a.source_id, b.source_id);
    EXPECT_EQ(a.provenance, b.provenance);
    EXPECT_EQ(a.features.shape, b.features.shape);
    EXPECT_EQ(a.features.data, b.features.data);
  }
}

TEST_F(SerializeTest, EmptyDatasetRoundTrips) {
  LabeledDataset empty;
  empty.num_classes = 7;
  const fs::path p = dir_ / "empty.bin";
  fedsim::save_dataset(p, empty);
  const auto loaded = fedsim::load_dataset(p);
  EXPECT_TRUE(loaded.dataset.empty());
  EXPECT_EQ(loaded.dataset.num_classes, 7);
}

TEST_F(SerializeTest, PoolRoundTripKeepsContributorsAndOrder) {
  fedsim::GlobalSyntheticPool pool;
  pool.num_classes = 3;
  pool.by_class.resize(3);
  for (int i = 0; i < 4; ++i) {
    fedsim::PoolEntry e;
    e.contributor = i % 2;
    e.example.label = 1;
    e.example.id = 100 + i;
    e.example.source_id = 10 + i;
    e.example.provenance = fedsim::Provenance::Synthetic;
    e.example.features = fedsim::Tensor::zeros({2});
    e.example.features.data = {0.5f + i, -1.0f * i};
    pool.by_class[1].push_back(std::move(e));
  }
  const fs::path p = dir_ / "pool.bin";
  fedsim::save_pool(p, pool);
  const auto loaded = fedsim::load_pool(p);
  EXPECT_EQ(loaded.num_classes, 3);
  EXPECT_EQ(loaded.class_counts(), pool.class_counts());
  for (std::size_t i = 0; i < pool.by_class[1].size(); ++i) {
    const auto& a = pool.by_class[1][i];
    const auto& b = loaded.by_class[1][i];
    EXPECT_EQ(a.contributor, b.contributor);
    EXPECT_EQ(a.example.id, b.example.id);
    EXPECT_EQ(a.example.source_id, b.example.source_id);
    EXPECT_EQ(a.example.provenance, b.example.provenance);
    EXPECT_EQ(a.example.features.data, b.example.features.data);
  }
}

TEST_F(SerializeTest, RoundLogsRoundTripThroughJsonLines) {
  const LabeledDataset test = fedsim::make_toy_dataset(4, 10, 5, 2.0, 3);
  const ModelParams m =
      fedsim::init_params(fedsim::Architecture::toy_mlp(5, 8, 4), 2);
  std::vector<fedsim::RoundLog> logs;
  for (int t = 1; t <= 3; ++t) {
    fedsim::RoundLog rl = fedsim::evaluate(m, test);
    rl.round = t;
    logs.push_back(std::move(rl));
  }
  const fs::path p = dir_ / "rounds.jsonl";
  fedsim::save_round_logs(p, "run-abc", 42, logs);
  const auto loaded = fedsim::load_round_logs(p);
  ASSERT_EQ(loaded.size(), logs.size());
  for (std::size_t i = 0; i < logs.size(); ++i) EXPECT_TRUE(logs[i] == loaded[i]);

  // The identifying fields survive as JSON values.
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.at("run_id"), "run-abc");
  EXPECT_EQ(j.at("seed"), 42);
}

TEST_F(SerializeTest, BadMagicIsAnIngestionError) {
  const fs::path p = dir_ / "garbage.bin";
  std::ofstream(p, std::ios::binary) << "XXXXjunkjunkjunk";
  try {
    fedsim::load_model(p);
    FAIL() << "expected ingestion error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Ingestion);
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }
  EXPECT_THROW(fedsim::load_dataset(p), Error);
  EXPECT_THROW(fedsim::load_pool(p), Error);
}

TEST_F(SerializeTest, UnsupportedVersionByteIsRejected) {
  const fs::path p = dir_ / "future.bin";
  {
    std::ofstream out(p, std::ios::binary);
    out.write("FSMP", 4);
    const std::uint8_t version = 99;
    out.write(reinterpret_cast<const char*>(&version), 1);
  }
  try {
    fedsim::load_model(p);
    FAIL() << "expected ingestion error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Ingestion);
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST_F(SerializeTest, TruncatedFilesAreDetected) {
  const ModelParams m =
      fedsim::init_params(fedsim::Architecture::toy_mlp(16, 32, 10), 5);
  const fs::path p = dir_ / "model.bin";
  fedsim::save_model(p, m);
  fs::resize_file(p, fs::file_size(p) / 2);
  try {
    fedsim::load_model(p);
    FAIL() << "expected ingestion error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Ingestion);
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST_F(SerializeTest, MissingFileNamesThePath) {
  const fs::path p = dir_ / "nope.bin";
  try {
    fedsim::load_dataset(p);
    FAIL() << "expected ingestion error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Ingestion);
    EXPECT_NE(std::string(e.what()).find("nope.bin"), std::string::npos);
  }
}

TEST_F(SerializeTest, MalformedJsonLineReportsLineNumber) {
  const fs::path p = dir_ / "rounds.jsonl";
  {
    const LabeledDataset test = fedsim::make_toy_dataset(3, 5, 4, 2.0, 3);
    const ModelParams m =
        fedsim::init_params(fedsim::Architecture::toy_mlp(4, 6, 3), 2);
    fedsim::RoundLog rl = fedsim::evaluate(m, test);
    rl.round = 1;
    fedsim::save_round_logs(p, "r", 0, {rl});
    std::ofstream out(p, std::ios::app);
    out << "{not json\n";
  }
  try {
    fedsim::load_round_logs(p);
    FAIL() << "expected ingestion error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Ingestion);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

}  // namespace
