#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "farzi/trajectory.hpp"

using namespace farzi;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("farzi_test_" + name)).string();
}

struct Toy {
  TokenCorpus corpus = gen_markov_corpus(3, 12, 1, 200, 8, 0.2);
  ModelConfig cfg;
  PretrainOptions opts;

  Toy() {
    cfg.vocab_size = 12;
    cfg.embed_dim = 4;
    cfg.max_seq_len = 8;
    opts.n_runs = 5;
    opts.epochs = 2;
    opts.batch = 16;
    opts.checkpoint_every = 5;
    opts.hyper.lr = 0.05;
    opts.seed = 4;
  }
};

}  // namespace

TEST(Pretrain, CountsRunsAndSnapshots) {
  Toy toy;
  const auto store = pretrain_trajectories(toy.corpus, toy.cfg, toy.opts);
  ASSERT_EQ(store.trajectories.size(), 5u);
  const std::size_t steps = 2 * ((toy.corpus.splits.train.size() + 15) / 16);
  for (const auto& t : store.trajectories) {
    EXPECT_EQ(t.checkpoints.size(), steps / 5 + 1);
    EXPECT_EQ(t.steps.front(), 0u);
    for (std::size_t i = 1; i < t.steps.size(); ++i) EXPECT_GT(t.steps[i], t.steps[i - 1]);
  }
  EXPECT_EQ(store.corpus_fingerprint, fingerprint(toy.corpus));
}

TEST(Pretrain, LossDecreasesInEveryRun) {
  Toy toy;
  const auto store = pretrain_trajectories(toy.corpus, toy.cfg, toy.opts);
  for (const auto& t : store.trajectories) EXPECT_LT(t.train_losses.back(), t.train_losses.front());
}

TEST(Pretrain, DeterministicAndThreadCountIndependent) {
  Toy toy;
  ::setenv("FARZI_THREADS", "1", 1);
  const auto a = pretrain_trajectories(toy.corpus, toy.cfg, toy.opts);
  ::setenv("FARZI_THREADS", "3", 1);
  const auto b = pretrain_trajectories(toy.corpus, toy.cfg, toy.opts);
  ::unsetenv("FARZI_THREADS");
  EXPECT_EQ(a, b);
  EXPECT_NE(a.trajectories[0].checkpoints.back(), a.trajectories[1].checkpoints.back());
}

TEST(Pretrain, RejectsBadOptions) {
  Toy toy;
  toy.opts.n_runs = 0;
  EXPECT_THROW(pretrain_trajectories(toy.corpus, toy.cfg, toy.opts), ConfigError);
  Toy toy2;
  toy2.cfg.vocab_size = 8;
  EXPECT_THROW(pretrain_trajectories(toy2.corpus, toy2.cfg, toy2.opts), ConfigError);
}

class StoreFile : public ::testing::Test {
 protected:
  void SetUp() override {
    Toy toy;
    toy.opts.n_runs = 2;
    store = pretrain_trajectories(toy.corpus, toy.cfg, toy.opts);
    path = temp_path("store.ftrj");
    save_store(store, path);
  }
  void TearDown() override { std::remove(path.c_str()); }

  void overwrite(std::size_t offset, char byte) {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(offset));
    f.put(byte);
  }

  TrajectoryStore store;
  std::string path;
};

TEST_F(StoreFile, RoundTripIsBitExact) { EXPECT_EQ(load_store(path), store); }

TEST_F(StoreFile, BadMagicNamesOffset) {
  overwrite(5, 'x');
  try {
    load_store(path);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 5u);
    EXPECT_NE(std::string(e.what()).find("offset 5"), std::string::npos);
  }
}

TEST_F(StoreFile, VersionMismatch) {
  overwrite(8, 7);
  try {
    load_store(path);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 8u);
  }
}

TEST_F(StoreFile, TruncationIsFormatError) {
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(load_store(path), FormatError);
  std::filesystem::resize_file(path, 30);
  EXPECT_THROW(load_store(path), FormatError);
}

TEST_F(StoreFile, FingerprintMismatchOnlyWarns) {
  const auto loaded = load_store(path, store.corpus_fingerprint ^ 1u);
  EXPECT_EQ(loaded, store);
}

TEST_F(StoreFile, VocabMismatchIsConformalityError) {
  const auto loaded = load_store(path);
  ModelConfig other = loaded.model_config;
  EXPECT_NO_THROW(loaded.require_conformal(other));
  other.vocab_size = 32;
  EXPECT_THROW(loaded.require_conformal(other), ConfigError);
}

TEST(StoreFileErrors, MissingFileIsConfigError) {
  EXPECT_THROW(load_store("/nonexistent/omega.ftrj"), ConfigError);
}
