#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "sop/errors.hpp"
#include "sop/pipeline.hpp"

using namespace sop;

namespace {

std::string field_of_error(const json& j) {
  try {
    RunConfig::from_json(j);
  } catch (const SchemaError& e) {
    return e.field();
  }
  return "";
}

}  // namespace

TEST(RunConfig, DefaultsValidate) {
  const auto c = RunConfig::defaults();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.sets.sizes, (std::vector<int>{3, 6, 9}));
  EXPECT_EQ(c.sets.per_size, 5);
  EXPECT_GE(c.min_entries, 20);
}

TEST(RunConfig, JsonRoundTripKeepsHash) {
  auto c = RunConfig::defaults();
  c.set_seed(42);
  c.opt.iterations = 7;
  c.opt.loss.weights.sem = 0.5;
  c.corpus.plain_evasive_share = 0.25;
  c.eval.methods = {"no_restriction", "logit_mask"};
  const auto back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(back.opt.iterations, 7);
  EXPECT_EQ(back.eval.methods.size(), 2u);
  EXPECT_EQ(back.corpus.plain_evasive_share, 0.25);
}

TEST(RunConfig, MissingFieldsKeepDefaults) {
  const auto c = RunConfig::from_json(json{{"seed", 3}});
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.opt.seed, 3u);
  EXPECT_EQ(c.train.seed, 3u);
  EXPECT_EQ(c.model.embed_dim, RunConfig::defaults().model.embed_dim);
}

TEST(RunConfig, SeedChangesHash) {
  auto a = RunConfig::defaults(), b = RunConfig::defaults();
  b.set_seed(2);
  EXPECT_NE(a.hash(), b.hash());
}

TEST(RunConfig, UnknownOrMistypedFieldsNamed) {
  EXPECT_EQ(field_of_error(json{{"bogus", 1}}), "bogus");
  EXPECT_EQ(field_of_error(json{{"optimize", {{"batchsize", 4}}}}), "optimize.batchsize");
  EXPECT_EQ(field_of_error(json{{"optimize", {{"weights", {{"res", "high"}}}}}}), "optimize.weights.res");
  EXPECT_EQ(field_of_error(json{{"optimize", {{"exec", "gpu"}}}}), "optimize.exec");
}

TEST(RunConfig, InvalidValuesRejected) {
  EXPECT_THROW(RunConfig::from_json(json{{"sets", {{"sizes", json::array()}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json(json{{"model", {{"embed_dim", 31}}}}), ConfigError);
}

TEST(RunConfig, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "sop_test_config.json";
  {
    std::ofstream(path) << R"({"seed": 9, "train": {"epochs": 2}})";
  }
  const auto c = load_run_config(path.string());
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.train.epochs, 2);
  {
    std::ofstream(path) << "{not json";
  }
  EXPECT_THROW(load_run_config(path.string()), SchemaError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_run_config(path.string()), ConfigError);
}

TEST(RunPaths, UnderDirectory) {
  const auto p = RunPaths::under("out");
  EXPECT_EQ(p.model, "out/model.bin");
  EXPECT_EQ(p.benchmark, "out/benchmark.json");
  EXPECT_EQ(p.artifacts, "out/artifacts");
  EXPECT_EQ(p.reports, "out/reports");
}

TEST(SelectedSet, Stem) {
  SelectedSet s;
  s.size = 6;
  s.index = 2;
  EXPECT_EQ(s.stem(), "k6_s2");
}

TEST(Pipeline, UntrainedModelFailsBenchmarkWithDiagnostics) {
  auto c = RunConfig::defaults();
  c.train.epochs = 0;
  c.model.embed_dim = 16;
  c.model.mlp_hidden = 32;
  const auto m = train_model(c);
  try {
    build_run_benchmark(m, c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("survived validation"), std::string::npos);
  }
}

TEST(Pipeline, SetSelectionIndependentPerSize) {
  Benchmark b;
  const auto world = World::builtin();
  const auto v = world.vocab();
  for (const auto& t : world.terms) {
    BenchmarkEntry e;
    e.category = t.category;
    e.term = make_term(t.surface, v, t.category);
    b.entries.push_back(e);
  }
  b.categories = world.categories;
  const auto c = RunConfig::defaults();
  const auto all = select_sets(b, c, {3, 6, 9});
  const auto only6 = select_sets(b, c, {6});
  ASSERT_EQ(all.size(), 15u);
  ASSERT_EQ(only6.size(), 5u);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(only6[i].size, 6);
    EXPECT_EQ(only6[i].rset.fingerprint(), all[5 + i].rset.fingerprint());
  }
  EXPECT_EQ(select_sets(b, c, {3})[0].rset.fingerprint(), all[0].rset.fingerprint());
}
