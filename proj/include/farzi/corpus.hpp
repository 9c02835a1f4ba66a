#pragma once

// Token-sequence corpora: loading, synthetic Markov generation, splits,
// batching and popularity bins.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "farzi/errors.hpp"
#include "farzi/models.hpp"
#include "farzi/seed.hpp"

namespace farzi {

enum class CorpusFormat { TokensTxt, JsonLines };

inline CorpusFormat parse_corpus_format(const std::string& s) {
  if (s == "tokens" || s == "txt" || s == "TokensTxt") return CorpusFormat::TokensTxt;
  if (s == "jsonl" || s == "JsonLines") return CorpusFormat::JsonLines;
  throw ConfigError("unknown corpus format '" + s + "' (expected tokens or jsonl)");
}

using Sequence = std::vector<std::int64_t>;

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> valid;
  std::vector<std::size_t> test;
};

enum class Split { Train, Valid, Test };

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "valid") return Split::Valid;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + s + "'");
}

/// Where a corpus came from. Generated corpora also keep the transition
/// table they were sampled from, row-major (V^order, V).
struct Provenance {
  std::string source;
  std::size_t order = 0;
  std::vector<double> transitions;
};

struct TokenCorpus {
  std::vector<Sequence> sequences;
  std::size_t vocab = 0;
  Splits splits;
  Provenance provenance;

  const std::vector<std::size_t>& split(Split s) const {
    switch (s) {
      case Split::Train:
        return splits.train;
      case Split::Valid:
        return splits.valid;
      case Split::Test:
        return splits.test;
    }
    return splits.train;
  }
  std::size_t num_tokens() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
  }
};

// ----------------------------------------------------------------------------
// Splits
// ----------------------------------------------------------------------------

/// Seeded 80/10/10 split. Validation and test each take round(n/10).
inline Splits make_splits(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t n_valid = (n + 5) / 10;
  const std::size_t n_test = std::min((n + 5) / 10, n - n_valid);
  Splits s;
  s.valid.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_valid));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_valid),
                idx.begin() + static_cast<std::ptrdiff_t>(n_valid + n_test));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_valid + n_test), idx.end());
  for (auto* v : {&s.train, &s.valid, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

// ----------------------------------------------------------------------------
// Loading and saving
// ----------------------------------------------------------------------------

struct LoadStats {
  std::size_t dropped_short = 0;
};

namespace corpus_detail {

inline std::int64_t parse_token(const std::string& field, std::size_t line) {
  std::int64_t v = 0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (field.empty() || ec != std::errc{} || ptr != last) throw ParseError("non-integer token '" + field + "'", line);
  if (v < 0) throw ParseError("negative token " + field, line);
  return v;
}

inline Sequence parse_tokens_line(std::string text, std::size_t line) {
  while (!text.empty() && (text.back() == '\r' || text.back() == ' ' || text.back() == '\t')) text.pop_back();
  Sequence seq;
  if (text.empty()) return seq;
  std::size_t start = 0;
  while (true) {
    const std::size_t sp = text.find(' ', start);
    seq.push_back(parse_token(text.substr(start, sp == std::string::npos ? std::string::npos : sp - start), line));
    if (sp == std::string::npos) break;
    start = sp + 1;
  }
  return seq;
}

inline Sequence parse_json_line(const std::string& text, std::size_t line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("invalid JSON: ") + e.what(), line);
  }
  if (!j.is_object() || !j.contains("tokens") || !j["tokens"].is_array()) {
    throw ParseError("expected an object with a \"tokens\" array", line);
  }
  Sequence seq;
  for (const auto& t : j["tokens"]) {
    if (!t.is_number_integer()) throw ParseError("non-integer token " + t.dump(), line);
    const auto v = t.get<std::int64_t>();
    if (v < 0) throw ParseError("negative token " + t.dump(), line);
    seq.push_back(v);
  }
  return seq;
}

}  // namespace corpus_detail

/// Parses a corpus from a stream. `vocab == 0` infers V as max token + 1.
inline TokenCorpus parse_corpus(std::istream& in, CorpusFormat format, std::size_t vocab = 0,
                                std::uint64_t split_seed = 0, LoadStats* stats = nullptr) {
  TokenCorpus c;
  LoadStats st;
  std::string text;
  std::size_t line = 0;
  bool any_line = false;
  std::int64_t max_tok = -1;
  while (std::getline(in, text)) {
    ++line;
    any_line = true;
    if (format == CorpusFormat::JsonLines && text.find_first_not_of(" \t\r") == std::string::npos) continue;
    Sequence seq = format == CorpusFormat::TokensTxt ? corpus_detail::parse_tokens_line(text, line)
                                                     : corpus_detail::parse_json_line(text, line);
    if (seq.size() < 2) {
      ++st.dropped_short;
      continue;
    }
    for (auto t : seq) {
      if (vocab > 0 && static_cast<std::size_t>(t) >= vocab) {
        throw ParseError("token " + std::to_string(t) + " out of range for vocab " + std::to_string(vocab), line);
      }
      max_tok = std::max(max_tok, t);
    }
    c.sequences.push_back(std::move(seq));
  }
  if (!any_line) throw ParseError("empty corpus", 0);
  if (c.sequences.empty()) throw ParseError("no sequence of length >= 2", line);
  if (st.dropped_short > 0) {
    std::clog << "warning: dropped " << st.dropped_short << " sequence(s) shorter than 2 tokens\n";
  }
  c.vocab = vocab > 0 ? vocab : static_cast<std::size_t>(max_tok + 1);
  if (c.vocab < 2) c.vocab = 2;
  c.splits = make_splits(c.sequences.size(), split_seed);
  if (stats) *stats = st;
  return c;
}

inline TokenCorpus load_corpus(const std::string& path, CorpusFormat format, std::size_t vocab = 0,
                               std::uint64_t split_seed = 0, LoadStats* stats = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open corpus '" + path + "'");
  TokenCorpus c = parse_corpus(in, format, vocab, split_seed, stats);
  c.provenance.source = path;
  return c;
}

/// Canonical TokensTxt text: one line per sequence, single spaces, '\n' ends.
inline std::string to_tokens_txt(const TokenCorpus& c) {
  std::string out;
  for (const auto& seq : c.sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(seq[i]);
    }
    out += '\n';
  }
  return out;
}

inline void save_corpus(const TokenCorpus& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write corpus '" + path + "'");
  out << to_tokens_txt(c);
}

/// 64-bit FNV-1a over the canonical TokensTxt serialization.
inline std::uint64_t fingerprint(const TokenCorpus& c) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : to_tokens_txt(c)) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

// ----------------------------------------------------------------------------
// Synthetic Markov corpora
// ----------------------------------------------------------------------------

namespace corpus_detail {

/// One symmetric Dirichlet(alpha) draw. Gammas are sampled in log space,
/// log G(α) = log G(α+1) + log(U)/α, so tiny concentrations do not underflow.
inline std::vector<double> dirichlet(std::size_t k, double alpha, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha + 1.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> logs(k);
  for (auto& l : logs) {
    double u = unif(rng);
    while (u <= 0.0) u = unif(rng);
    l = std::log(gamma(rng)) + std::log(u) / alpha;
  }
  const double mx = *std::max_element(logs.begin(), logs.end());
  double sum = 0.0;
  for (auto& l : logs) sum += (l = std::exp(l - mx));
  for (auto& l : logs) l /= sum;
  return logs;
}

inline std::size_t sample(const double* row, std::size_t k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  double acc = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    acc += row[j];
    if (u < acc) return j;
  }
  for (std::size_t j = k; j-- > 0;) {
    if (row[j] > 0.0) return j;
  }
  return k - 1;
}

}  // namespace corpus_detail

/// Markov chain corpus of order 1 or 2. Each state's next-token row is a
/// symmetric Dirichlet(concentration) draw; the leading `order` tokens of
/// every sequence are uniform.
inline TokenCorpus gen_markov_corpus(std::uint64_t seed, std::size_t vocab, std::size_t order, std::size_t n_sequences,
                                     std::size_t length, double concentration) {
  if (order != 1 && order != 2) throw ConfigError("markov order must be 1 or 2");
  if (vocab < 2) throw ConfigError("vocab must be >= 2");
  if (length < 2) throw ConfigError("sequence length must be >= 2");
  if (!(concentration > 0.0)) throw ConfigError("concentration must be > 0");
  std::mt19937_64 rng(seed);
  const std::size_t states = order == 1 ? vocab : vocab * vocab;
  TokenCorpus c;
  c.vocab = vocab;
  c.provenance.order = order;
  c.provenance.transitions.reserve(states * vocab);
  for (std::size_t s = 0; s < states; ++s) {
    const auto row = corpus_detail::dirichlet(vocab, concentration, rng);
    c.provenance.transitions.insert(c.provenance.transitions.end(), row.begin(), row.end());
  }
  std::ostringstream src;
  src << "markov(seed=" << seed << ", V=" << vocab << ", order=" << order << ", n=" << n_sequences
      << ", length=" << length << ", concentration=" << concentration << ")";
  c.provenance.source = src.str();

  std::uniform_int_distribution<std::int64_t> first(0, static_cast<std::int64_t>(vocab) - 1);
  c.sequences.reserve(n_sequences);
  for (std::size_t n = 0; n < n_sequences; ++n) {
    Sequence seq;
    seq.reserve(length);
    for (std::size_t i = 0; i < std::min(order, length); ++i) seq.push_back(first(rng));
    while (seq.size() < length) {
      std::size_t state = static_cast<std::size_t>(seq.back());
      if (order == 2) state += vocab * static_cast<std::size_t>(seq[seq.size() - 2]);
      seq.push_back(static_cast<std::int64_t>(
          corpus_detail::sample(c.provenance.transitions.data() + state * vocab, vocab, rng)));
    }
    c.sequences.push_back(std::move(seq));
  }
  c.splits = make_splits(c.sequences.size(), mix_seed(seed, 0x5EED));
  return c;
}

/// Visit-weighted mean total-variation distance between the empirical
/// next-token distribution of each state and the stored oracle row.
inline double transition_tv(const TokenCorpus& c) {
  const std::size_t V = c.vocab, order = c.provenance.order;
  if (order == 0 || c.provenance.transitions.empty()) throw ConfigError("corpus has no oracle transition table");
  const std::size_t states = order == 1 ? V : V * V;
  std::vector<double> counts(states * V, 0.0), visits(states, 0.0);
  for (const auto& seq : c.sequences) {
    for (std::size_t i = order; i < seq.size(); ++i) {
      std::size_t s = static_cast<std::size_t>(seq[i - 1]);
      if (order == 2) s += V * static_cast<std::size_t>(seq[i - 2]);
      counts[s * V + static_cast<std::size_t>(seq[i])] += 1.0;
      visits[s] += 1.0;
    }
  }
  double total = 0.0, weight = 0.0;
  for (std::size_t s = 0; s < states; ++s) {
    if (visits[s] == 0.0) continue;
    double tv = 0.0;
    for (std::size_t j = 0; j < V; ++j) tv += std::abs(counts[s * V + j] / visits[s] - c.provenance.transitions[s * V + j]);
    total += 0.5 * tv * visits[s];
    weight += visits[s];
  }
  return weight > 0.0 ? total / weight : 0.0;
}

// ----------------------------------------------------------------------------
// Batching
// ----------------------------------------------------------------------------

/// Right-padded batch of the given sequences, each truncated to its last
/// `max_len` tokens.
inline HardBatch make_hard_batch(const TokenCorpus& c, const std::vector<std::size_t>& idx, std::size_t max_len) {
  HardBatch hb;
  hb.batch = idx.size();
  hb.length = max_len;
  hb.tokens.assign(hb.batch * max_len, -1);
  hb.mask.assign(hb.batch * max_len, 0);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& seq = c.sequences.at(idx[b]);
    const std::size_t n = std::min(seq.size(), max_len);
    const std::size_t off = seq.size() - n;
    for (std::size_t i = 0; i < n; ++i) {
      hb.tokens[b * max_len + i] = seq[off + i];
      hb.mask[b * max_len + i] = 1;
    }
  }
  return hb;
}

/// Deterministic stream of uniformly sampled batches from one split. Within a
/// batch, sequences are distinct unless batch_size exceeds the split size,
/// in which case sampling is with replacement.
class BatchIter {
 public:
  BatchIter(const TokenCorpus& corpus, Split split, std::size_t batch_size, std::size_t max_len, std::uint64_t seed)
      : corpus_(&corpus), pool_(corpus.split(split)), batch_(batch_size), max_len_(max_len), rng_(seed) {
    if (pool_.empty()) throw ConfigError("batch_iter: split is empty");
    if (batch_size == 0) throw ConfigError("batch_iter: batch size must be >= 1");
    if (max_len < 2) throw ConfigError("batch_iter: max_len must be >= 2");
  }

  HardBatch next() { return make_hard_batch(*corpus_, next_indices(), max_len_); }

  std::vector<std::size_t> next_indices() {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    if (batch_ > pool_.size()) {
      std::uniform_int_distribution<std::size_t> pick(0, pool_.size() - 1);
      for (std::size_t i = 0; i < batch_; ++i) out.push_back(pool_[pick(rng_)]);
      return out;
    }
    std::vector<std::size_t> p = pool_;
    for (std::size_t i = 0; i < batch_; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, p.size() - 1);
      std::swap(p[i], p[pick(rng_)]);
      out.push_back(p[i]);
    }
    return out;
  }

 private:
  const TokenCorpus* corpus_;
  std::vector<std::size_t> pool_;
  std::size_t batch_;
  std::size_t max_len_;
  std::mt19937_64 rng_;
};

inline BatchIter batch_iter(const TokenCorpus& corpus, Split split, std::size_t batch_size, std::size_t max_len,
                            std::uint64_t seed) {
  return BatchIter(corpus, split, batch_size, max_len, seed);
}

// ----------------------------------------------------------------------------
// Popularity
// ----------------------------------------------------------------------------

/// Per-token counts over a split and ten equal-sized popularity bins. Bin 0
/// holds the least popular tokens; ties rank by ascending id.
struct PopularityIndex {
  std::vector<std::size_t> counts;
  std::vector<std::size_t> bin;  ///< token → decile in [0, 10)

  static PopularityIndex build(const TokenCorpus& c, Split split = Split::Train) {
    PopularityIndex p;
    p.counts.assign(c.vocab, 0);
    for (std::size_t i : c.split(split)) {
      for (auto t : c.sequences[i]) ++p.counts[static_cast<std::size_t>(t)];
    }
    std::vector<std::size_t> order(c.vocab);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p.counts[a] < p.counts[b]; });
    p.bin.assign(c.vocab, 0);
    for (std::size_t r = 0; r < order.size(); ++r) p.bin[order[r]] = r * 10 / order.size();
    return p;
  }
  std::size_t vocab() const { return counts.size(); }
};

}  // namespace farzi
