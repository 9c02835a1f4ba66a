#pragma once

// Ranking and language-modeling metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "farzi/corpus.hpp"
#include "farzi/errors.hpp"
#include "farzi/models.hpp"

namespace farzi {

struct RankInstance {
  std::vector<double> scores;          ///< one score per item
  std::vector<std::size_t> positives;  ///< item ids
};

struct MetricReport {
  std::map<std::size_t, double> hr;
  std::map<std::size_t, double> ndcg;
  std::optional<double> auc;
  std::optional<double> ppl;
  std::optional<double> top1_acc;
  std::size_t n_instances = 0;
  std::size_t auc_excluded = 0;  ///< instances without a negative item
};

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j;
  for (const auto& [k, v] : r.hr) j["hr@" + std::to_string(k)] = v;
  for (const auto& [k, v] : r.ndcg) j["ndcg@" + std::to_string(k)] = v;
  if (r.auc) j["auc"] = *r.auc;
  if (r.ppl) j["ppl"] = std::isfinite(*r.ppl) ? nlohmann::json(*r.ppl) : nlohmann::json("inf");
  if (r.top1_acc) j["acc"] = *r.top1_acc;
  j["n"] = r.n_instances;
  return j;
}

namespace metrics_detail {

/// Item ids ordered by descending score; ties by ascending id.
inline std::vector<std::size_t> ranking(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

inline void validate(const RankInstance& in) {
  if (in.positives.empty()) throw ConfigError("rank instance has no positive item");
  for (auto p : in.positives) {
    if (p >= in.scores.size()) throw ConfigError("positive item " + std::to_string(p) + " outside the item space");
  }
}

}  // namespace metrics_detail

/// Keeps the ks that fit the item space, sorted and deduplicated. Larger ks
/// are dropped with a warning.
inline std::vector<std::size_t> usable_ks(std::vector<std::size_t> ks, std::size_t items) {
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  std::vector<std::size_t> out;
  for (auto k : ks) {
    if (k == 0) throw ConfigError("k must be >= 1");
    if (k > items) {
      std::clog << "warning: k=" << k << " exceeds the " << items << " items and is skipped\n";
      continue;
    }
    out.push_back(k);
  }
  return out;
}

/// HR@k, nDCG@k (1-based ranks, log2(rank+1) discount, IDCG summed over all
/// |I+| positives) and AUC with ties counted as one half.
inline MetricReport rank_metrics(const std::vector<RankInstance>& instances, const std::vector<std::size_t>& ks_in) {
  MetricReport r;
  if (instances.empty()) return r;
  const std::size_t items = instances.front().scores.size();
  const auto ks = usable_ks(ks_in, items);
  std::vector<double> hr(ks.size(), 0.0), ndcg(ks.size(), 0.0);
  double auc_sum = 0.0;
  std::size_t auc_n = 0;
  for (const auto& in : instances) {
    metrics_detail::validate(in);
    if (in.scores.size() != items) throw ShapeError("rank instances disagree on the item count");
    const auto order = metrics_detail::ranking(in.scores);
    std::vector<std::size_t> rank(items);
    for (std::size_t r1 = 0; r1 < items; ++r1) rank[order[r1]] = r1 + 1;
    std::vector<char> pos(items, 0);
    for (auto p : in.positives) pos[p] = 1;
    const std::size_t n_pos = static_cast<std::size_t>(std::count(pos.begin(), pos.end(), 1));
    double idcg = 0.0;
    for (std::size_t i = 1; i <= n_pos; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 1.0);
    for (std::size_t q = 0; q < ks.size(); ++q) {
      std::size_t hits = 0;
      double dcg = 0.0;
      for (std::size_t item = 0; item < items; ++item) {
        if (pos[item] && rank[item] <= ks[q]) {
          ++hits;
          dcg += 1.0 / std::log2(static_cast<double>(rank[item]) + 1.0);
        }
      }
      hr[q] += static_cast<double>(hits) / static_cast<double>(n_pos);
      ndcg[q] += dcg / idcg;
    }
    if (n_pos == items) {
      ++r.auc_excluded;
      continue;
    }
    // pairs (positive, negative): count by sorting scores once
    std::vector<double> neg;
    neg.reserve(items - n_pos);
    for (std::size_t item = 0; item < items; ++item) {
      if (!pos[item]) neg.push_back(in.scores[item]);
    }
    std::sort(neg.begin(), neg.end());
    double wins = 0.0;
    for (std::size_t item = 0; item < items; ++item) {
      if (!pos[item]) continue;
      const auto lo = std::lower_bound(neg.begin(), neg.end(), in.scores[item]);
      const auto hi = std::upper_bound(neg.begin(), neg.end(), in.scores[item]);
      wins += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
    }
    auc_sum += wins / (static_cast<double>(n_pos) * static_cast<double>(neg.size()));
    ++auc_n;
  }
  if (r.auc_excluded > 0) {
    std::clog << "warning: " << r.auc_excluded << " instance(s) with no negative item excluded from AUC\n";
  }
  const double n = static_cast<double>(instances.size());
  for (std::size_t q = 0; q < ks.size(); ++q) {
    r.hr[ks[q]] = hr[q] / n;
    r.ndcg[ks[q]] = ndcg[q] / n;
  }
  if (auc_n > 0) r.auc = auc_sum / static_cast<double>(auc_n);
  r.n_instances = instances.size();
  return r;
}

// ----------------------------------------------------------------------------
// Perplexity
// ----------------------------------------------------------------------------

/// Corpus perplexity from per-sentence mean log2-probabilities: each sentence
/// contributes 2^(−mean), and the corpus value is their arithmetic mean.
inline double corpus_perplexity(const std::vector<std::vector<double>>& sentence_log2_probs) {
  if (sentence_log2_probs.empty()) throw ConfigError("perplexity of an empty split");
  double sum = 0.0;
  for (const auto& s : sentence_log2_probs) {
    if (s.empty()) throw ConfigError("sentence without predicted tokens");
    const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    sum += std::exp2(-mean);
  }
  return sum / static_cast<double>(sentence_log2_probs.size());
}

struct LanguageModelScore {
  double ppl = 0.0;
  double top1_acc = 0.0;
};

/// Perplexity and greedy next-token accuracy of a model over one split.
/// Sequences keep their last max_seq_len tokens.
inline LanguageModelScore perplexity(const ModelConfig& cfg, const ParamVector& params, const TokenCorpus& corpus,
                                     Split split, std::size_t eval_batch = 256) {
  const auto& idx = corpus.split(split);
  if (idx.empty()) throw ConfigError("perplexity: split is empty");
  std::vector<std::vector<double>> sentences;
  std::size_t correct = 0, total = 0;
  const std::size_t V = cfg.vocab_size;
  for (std::size_t start = 0; start < idx.size(); start += eval_batch) {
    const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + eval_batch)));
    const auto hb = make_hard_batch(corpus, chunk, cfg.max_seq_len);
    const auto logits = hard_forward(cfg, params, hb);
    const std::size_t L = hb.length;
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      std::vector<double> lp;
      for (std::size_t i = 0; i + 1 < L; ++i) {
        const std::size_t k = b * L + i;
        if (!hb.mask[k] || !hb.mask[k + 1]) continue;
        const double* row = logits.data() + (b * (L - 1) + i) * V;
        const double mx = *std::max_element(row, row + V);
        double z = 0.0;
        for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
        const auto target = static_cast<std::size_t>(hb.tokens[k + 1]);
        lp.push_back((row[target] - mx - std::log(z)) / std::log(2.0));
        const std::size_t pred = static_cast<std::size_t>(std::max_element(row, row + V) - row);
        correct += pred == target;
        ++total;
      }
      sentences.push_back(std::move(lp));
    }
  }
  return {corpus_perplexity(sentences), static_cast<double>(correct) / static_cast<double>(total)};
}

/// Next-item instances: the last token of each sequence is the positive and
/// the model scores all items from the preceding context.
inline std::vector<RankInstance> next_item_instances(const ModelConfig& cfg, const ParamVector& params,
                                                     const TokenCorpus& corpus, Split split,
                                                     std::size_t eval_batch = 256) {
  const auto& idx = corpus.split(split);
  std::vector<RankInstance> out;
  out.reserve(idx.size());
  const std::size_t V = cfg.vocab_size;
  for (std::size_t start = 0; start < idx.size(); start += eval_batch) {
    const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + eval_batch)));
    const auto hb = make_hard_batch(corpus, chunk, cfg.max_seq_len);
    const auto logits = hard_forward(cfg, params, hb);
    const std::size_t L = hb.length;
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      std::size_t last = 0;
      for (std::size_t i = 0; i < L; ++i) {
        if (hb.mask[b * L + i]) last = i;
      }
      const double* row = logits.data() + (b * (L - 1) + last - 1) * V;
      out.push_back({std::vector<double>(row, row + V), {static_cast<std::size_t>(hb.tokens[b * L + last])}});
    }
  }
  return out;
}

/// Ranking metrics plus perplexity and accuracy for a model on one split.
inline MetricReport evaluate_model(const ModelConfig& cfg, const ParamVector& params, const TokenCorpus& corpus,
                                   Split split, const std::vector<std::size_t>& ks) {
  MetricReport r = rank_metrics(next_item_instances(cfg, params, corpus, split), ks);
  const auto lm = perplexity(cfg, params, corpus, split);
  r.ppl = lm.ppl;
  r.top1_acc = lm.top1_acc;
  return r;
}

/// Metrics per popularity decile of each instance's first positive item.
/// Deciles without instances are absent.
inline std::array<std::optional<MetricReport>, 10> stratified_report(const std::vector<RankInstance>& instances,
                                                                     const PopularityIndex& popularity,
                                                                     const std::vector<std::size_t>& ks) {
  std::array<std::vector<RankInstance>, 10> groups;
  for (const auto& in : instances) {
    metrics_detail::validate(in);
    const auto p = in.positives.front();
    if (p >= popularity.vocab()) throw ConfigError("popularity index does not cover item " + std::to_string(p));
    groups[popularity.bin[p]].push_back(in);
  }
  std::array<std::optional<MetricReport>, 10> out;
  for (std::size_t d = 0; d < 10; ++d) {
    if (!groups[d].empty()) out[d] = rank_metrics(groups[d], ks);
  }
  return out;
}

}  // namespace farzi
