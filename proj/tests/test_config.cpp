// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "textdistill/config.hpp"

namespace td = textdistill;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

td::Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const td::Error& e) {
    return e.code();
  }
  return td::Errc::Io;  // sentinel: nothing thrown
}

}  // namespace

TEST(RunConfig, DefaultsDescribeTheSyntheticRun) {
  const auto c = td::RunConfig::from_json(json::object());
  EXPECT_FALSE(c.data.uses_files());
  EXPECT_EQ(c.embeddings.dim, 16u);
  EXPECT_EQ(c.distill.dim, 16u);
  EXPECT_EQ(c.distill.max_len, c.data.max_len);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, UnknownKeysAreRejectedAtEveryLevel) {
  for (const json& j : {json{{"sed", 1}}, json{{"data", {{"trian", "a.csv"}}}}, json{{"embeddings", {{"sigma2", 1}}}},
                        json{{"model", {{"kernel", 3}}}}, json{{"distill", {{"lr", 0.1}}}},
                        json{{"eval", {{"epoch", 3}}}}, json{{"synthetic", {{"rate", 0.2}}}}}) {
    EXPECT_EQ(code_of([&] { td::RunConfig::from_json(j); }), td::Errc::InvalidConfig) << j.dump();
  }
}

TEST(RunConfig, WrongTypesAreInvalidConfig) {
  EXPECT_EQ(code_of([] { td::RunConfig::from_json({{"seed", "zero"}}); }), td::Errc::InvalidConfig);
  EXPECT_EQ(code_of([] { td::RunConfig::from_json({{"distill", {{"outer_lr", "fast"}}}}); }), td::Errc::InvalidConfig);
}

TEST(RunConfig, DerivedFieldsMustAgree) {
  EXPECT_NO_THROW(td::RunConfig::from_json({{"embeddings", {{"dim", 8}}}, {"model", {{"dim", 8}}}}));
  EXPECT_EQ(code_of([] { td::RunConfig::from_json({{"embeddings", {{"dim", 8}}}, {"model", {{"dim", 9}}}}); }),
            td::Errc::InvalidConfig);
  EXPECT_EQ(code_of([] { td::RunConfig::from_json({{"data", {{"max_len", 8}}}, {"distill", {{"max_len", 9}}}}); }),
            td::Errc::InvalidConfig);
  EXPECT_EQ(code_of([] { td::RunConfig::from_json({{"distill", {{"seed", 3}}}}); }), td::Errc::InvalidConfig);
  const auto c = td::RunConfig::from_json({{"seed", 9}});
  EXPECT_EQ(c.distill.seed, 9u);
}

TEST(RunConfig, ResolveFillsModelShape) {
  auto c = td::RunConfig::from_json({{"data", {{"max_len", 12}}}, {"embeddings", {{"dim", 5}}}});
  c.resolve(3);
  EXPECT_EQ(c.model.dim, 5u);
  EXPECT_EQ(c.model.max_len, 12u);
  EXPECT_EQ(c.model.num_classes, 3u);
}

TEST(RunConfig, OutOfRangeValuesFailValidation) {
  for (const json& j : {json{{"distill", {{"outer_lr", -1.0}}}}, json{{"distill", {{"per_class", 0}}}},
                        json{{"eval", {{"seeds", 0}}}}, json{{"embeddings", {{"sigma", 0.0}}}},
                        json{{"data", {{"max_len", 0}}}}}) {
    EXPECT_EQ(code_of([&] { td::RunConfig::from_json(j).validate(); }), td::Errc::InvalidConfig) << j.dump();
  }
}

TEST(RunConfig, PathsResolveAgainstConfigDirectoryAndMustExist) {
  TempDir dir("textdistill_config_test");
  fs::create_directories(dir.path / "data");
  td::write_file_atomic(dir.path / "data/train.csv", "\"1\",\"a b\"\n\"2\",\"c d\"\n");
  td::write_file_atomic(dir.path / "data/test.csv", "\"2\",\"a d\"\n");
  const json j = {{"out", "o"}, {"data", {{"train", "data/train.csv"}, {"test", "data/test.csv"}, {"max_len", 4}}}};
  td::write_file_atomic(dir.path / "run.json", j.dump());
  const auto c = td::RunConfig::load(dir.path / "run.json");
  EXPECT_EQ(c.data.train, dir.path / "data/train.csv");
  EXPECT_EQ(c.out, dir.path / "o");
  EXPECT_NO_THROW(c.validate());

  const auto data = td::load_run_data(c);
  EXPECT_EQ(data.train.size(), 2u);
  EXPECT_EQ(data.test.size(), 1u);
  EXPECT_EQ(data.train.num_classes, 2u);
  EXPECT_EQ(data.inputs.size(), 2u);
  EXPECT_EQ(data.table.dim, 16u);

  auto missing = j;
  missing["data"]["test"] = "data/none.csv";
  td::write_file_atomic(dir.path / "bad.json", missing.dump());
  EXPECT_EQ(code_of([&] { td::RunConfig::load(dir.path / "bad.json").validate(); }), td::Errc::InvalidConfig);
  auto no_test = j;
  no_test["data"].erase("test");
  EXPECT_EQ(code_of([&] { td::RunConfig::from_json(no_test, dir.path).validate(); }), td::Errc::InvalidConfig);
}

TEST(RunConfig, UnreadableOrMalformedFilesAreInvalidConfig) {
  TempDir dir("textdistill_config_bad");
  EXPECT_EQ(code_of([&] { td::RunConfig::load(dir.path / "absent.json"); }), td::Errc::InvalidConfig);
  td::write_file_atomic(dir.path / "x.json", "{ not json");
  EXPECT_EQ(code_of([&] { td::RunConfig::load(dir.path / "x.json"); }), td::Errc::InvalidConfig);
}

TEST(RunConfig, JsonRoundTripPreservesSettings) {
  auto c = td::RunConfig::from_json({{"seed", 4}, {"eval", {{"sweep", {1, 2, 5}}}}, {"model", {{"widths", {1, 2}}}}});
  const auto again = td::RunConfig::from_json(c.to_json());
  EXPECT_EQ(again.to_json(), c.to_json());
}

TEST(RunData, SyntheticDataIsDeterministic) {
  td::RunConfig c;
  c.synthetic.train_size = 40;
  c.synthetic.test_size = 8;
  const auto a = td::load_run_data(c), b = td::load_run_data(c);
  EXPECT_EQ(a.table.hash(), b.table.hash());
  ASSERT_EQ(a.train.size(), 40u);
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train.examples[i].ids, b.train.examples[i].ids);
  EXPECT_TRUE(a.inputs.empty());
}
