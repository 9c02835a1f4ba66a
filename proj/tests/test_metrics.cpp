#include <gtest/gtest.h>

#include <cmath>

#include "farzi/metrics.hpp"

using namespace farzi;

namespace {

RankInstance with_positive_at_rank(std::size_t items, std::size_t positive, std::size_t rank) {
  RankInstance in;
  in.scores.assign(items, 0.0);
  std::size_t r = 1;
  for (std::size_t i = 0; i < items; ++i) {
    if (i == positive) continue;
    if (r == rank) ++r;
    in.scores[i] = -static_cast<double>(r++);
  }
  in.scores[positive] = -static_cast<double>(rank);
  in.positives = {positive};
  return in;
}

}  // namespace

TEST(RankMetrics, PerfectRanking) {
  const auto r = rank_metrics({with_positive_at_rank(20, 4, 1)}, {10});
  EXPECT_EQ(r.hr.at(10), 1.0);
  EXPECT_EQ(r.ndcg.at(10), 1.0);
  EXPECT_EQ(*r.auc, 1.0);
}

TEST(RankMetrics, SecondPlaceNdcg) {
  const auto r = rank_metrics({with_positive_at_rank(20, 4, 2)}, {1, 10});
  EXPECT_DOUBLE_EQ(r.ndcg.at(10), 1.0 / std::log2(3.0));
  EXPECT_NEAR(r.ndcg.at(10), 0.6309, 1e-4);
  EXPECT_EQ(r.hr.at(1), 0.0);
  EXPECT_EQ(r.hr.at(10), 1.0);
}

TEST(RankMetrics, ConstantScoresGiveHalfAuc) {
  RankInstance in{std::vector<double>(50, 3.0), {7, 9}};
  EXPECT_EQ(*rank_metrics({in}, {10}).auc, 0.5);
}

TEST(RankMetrics, TiesBreakByItemId) {
  RankInstance in{std::vector<double>(5, 1.0), {0}};
  EXPECT_EQ(rank_metrics({in}, {1}).hr.at(1), 1.0);
  in.positives = {1};
  EXPECT_EQ(rank_metrics({in}, {1}).hr.at(1), 0.0);
}

TEST(RankMetrics, HitRateAtItemCountIsOne) {
  std::vector<RankInstance> inst;
  for (std::size_t k = 0; k < 10; ++k) inst.push_back(with_positive_at_rank(12, k, 12 - k));
  EXPECT_EQ(rank_metrics(inst, {12}).hr.at(12), 1.0);
}

TEST(RankMetrics, MonotoneInK) {
  std::vector<RankInstance> inst;
  for (std::size_t k = 0; k < 30; ++k) inst.push_back(with_positive_at_rank(30, (k * 7) % 30, k + 1));
  const auto r = rank_metrics(inst, {1, 2, 5, 10, 20, 30});
  double prev_hr = 0.0, prev_ndcg = 0.0;
  for (const auto& [k, v] : r.hr) {
    EXPECT_GE(v, prev_hr);
    EXPECT_GE(r.ndcg.at(k), prev_ndcg);
    prev_hr = v;
    prev_ndcg = r.ndcg.at(k);
  }
}

TEST(RankMetrics, AucInvariantUnderMonotoneTransform) {
  RankInstance in{{0.3, -1.2, 2.5, 0.3, 0.9, -0.4}, {0, 4}};
  RankInstance t = in;
  for (auto& s : t.scores) s = std::exp(3.0 * s) + 1.0;
  EXPECT_DOUBLE_EQ(*rank_metrics({in}, {3}).auc, *rank_metrics({t}, {3}).auc);
  EXPECT_DOUBLE_EQ(*rank_metrics({in}, {3}).auc, (2.5 + 3.0) / 8.0);
}

TEST(RankMetrics, MultiplePositivesUseFullIdcg) {
  // positives at ranks 1 and 3; IDCG sums over both positives
  RankInstance in{{5, 4, 3, 2, 1}, {0, 2}};
  const auto r = rank_metrics({in}, {1, 3});
  const double idcg = 1.0 + 1.0 / std::log2(3.0);
  EXPECT_DOUBLE_EQ(r.ndcg.at(1), 1.0 / idcg);
  EXPECT_DOUBLE_EQ(r.ndcg.at(3), (1.0 + 0.5) / idcg);
  EXPECT_DOUBLE_EQ(r.hr.at(1), 0.5);
}

TEST(RankMetrics, AllPositiveInstanceExcludedFromAuc) {
  RankInstance all{{1, 2, 3}, {0, 1, 2}};
  const auto r = rank_metrics({all, with_positive_at_rank(3, 0, 1)}, {1});
  EXPECT_EQ(r.auc_excluded, 1u);
  EXPECT_EQ(*r.auc, 1.0);
  EXPECT_FALSE(rank_metrics({all}, {1}).auc.has_value());
}

TEST(RankMetrics, OversizedKIsDroppedAndBadInputRejected) {
  const auto r = rank_metrics({with_positive_at_rank(5, 0, 1)}, {3, 10});
  EXPECT_EQ(r.hr.count(10), 0u);
  EXPECT_EQ(r.hr.count(3), 1u);
  EXPECT_THROW(rank_metrics({RankInstance{{1, 2}, {}}}, {1}), ConfigError);
  EXPECT_THROW(rank_metrics({RankInstance{{1, 2}, {2}}}, {1}), ConfigError);
}

TEST(Perplexity, SentenceAverage) {
  // sentence perplexities 100 and 300
  const std::vector<std::vector<double>> s{{-std::log2(100.0), -std::log2(100.0)}, {-std::log2(300.0)}};
  EXPECT_NEAR(corpus_perplexity(s), 200.0, 1e-9);
  const std::vector<std::vector<double>> rev{s[1], s[0]};
  EXPECT_EQ(corpus_perplexity(rev), corpus_perplexity(s));
}

TEST(Perplexity, CertainModelIsOne) {
  EXPECT_EQ(corpus_perplexity({{0.0, 0.0}, {0.0}}), 1.0);
}

TEST(Perplexity, ZeroProbabilityIsInfinite) {
  EXPECT_TRUE(std::isinf(corpus_perplexity({{-INFINITY, 0.0}})));
}

TEST(Perplexity, UniformModelEqualsVocab) {
  ModelConfig cfg;
  cfg.vocab_size = 2000;
  cfg.embed_dim = 2;
  cfg.max_seq_len = 6;
  TokenCorpus c;
  c.vocab = 2000;
  c.sequences = {{5, 1999, 3, 0}, {17, 4}, {8, 8, 8, 8, 8, 8, 8}};
  c.splits.test = {0, 1, 2};
  const auto lm = perplexity(cfg, init_params(cfg), c, Split::Test);
  EXPECT_NEAR(lm.ppl, 2000.0, 1e-8);
}

TEST(Perplexity, EvaluateModelReportsAllFields) {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.embed_dim = 4;
  cfg.max_seq_len = 6;
  const auto c = gen_markov_corpus(1, 12, 1, 40, 6, 0.5);
  const auto r = evaluate_model(cfg, init_params(cfg), c, Split::Test, {10, 100});
  EXPECT_TRUE(r.ppl.has_value());
  EXPECT_TRUE(r.top1_acc.has_value());
  EXPECT_TRUE(r.auc.has_value());
  EXPECT_EQ(r.hr.count(10), 1u);
  EXPECT_EQ(r.hr.count(100), 0u);
  EXPECT_EQ(r.n_instances, c.splits.test.size());
  const auto j = to_json(r);
  EXPECT_TRUE(j.contains("hr@10"));
  EXPECT_TRUE(j.contains("ppl"));
}

TEST(Stratified, OnlyPopulatedDecilesReported) {
  PopularityIndex p;
  p.counts.assign(20, 1);
  p.bin.assign(20, 0);
  p.bin[18] = p.bin[19] = 9;
  std::vector<RankInstance> inst{with_positive_at_rank(20, 18, 1), with_positive_at_rank(20, 19, 4)};
  const auto rep = stratified_report(inst, p, {1, 10});
  for (std::size_t d = 0; d < 9; ++d) EXPECT_FALSE(rep[d].has_value());
  ASSERT_TRUE(rep[9].has_value());
  EXPECT_EQ(rep[9]->n_instances, 2u);
}

TEST(Stratified, WeightedMergeEqualsGlobal) {
  PopularityIndex p;
  p.counts.assign(30, 0);
  p.bin.resize(30);
  for (std::size_t i = 0; i < 30; ++i) p.bin[i] = i / 3;
  std::vector<RankInstance> inst;
  for (std::size_t k = 0; k < 60; ++k) inst.push_back(with_positive_at_rank(30, (k * 11) % 30, 1 + (k * 7) % 30));
  const auto global = rank_metrics(inst, {5});
  const auto rep = stratified_report(inst, p, {5});
  double merged = 0.0;
  std::size_t n = 0;
  for (const auto& r : rep) {
    if (!r) continue;
    merged += r->hr.at(5) * static_cast<double>(r->n_instances);
    n += r->n_instances;
  }
  EXPECT_EQ(n, 60u);
  EXPECT_NEAR(merged / 60.0, global.hr.at(5), 1e-12);
}
