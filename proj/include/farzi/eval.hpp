#pragma once

// Training fresh students on synthetic or real data and scoring them on a
// real split.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "farzi/corpus.hpp"
#include "farzi/metrics.hpp"
#include "farzi/models.hpp"
#include "farzi/optim.hpp"
#include "farzi/seed.hpp"
#include "farzi/synthetic.hpp"

namespace farzi {

struct StudentHyper {
  std::size_t steps = 300;
  std::size_t batch = 32;  ///< sequences per step (capped at the pool size)
  AdamHyper adam;
  std::uint64_t seed = 0;
  /// When > 0 and a validation corpus is supplied, the student is scored on
  /// its validation split every this many steps and the parameters with the
  /// lowest validation perplexity are kept.
  std::size_t select_every = 0;
};

namespace eval_detail {

/// Tracks the parameters with the best validation perplexity.
class Selector {
 public:
  Selector(const ModelConfig& cfg, const StudentHyper& h, const TokenCorpus* valid)
      : cfg_(cfg), every_(valid && !valid->split(Split::Valid).empty() ? h.select_every : 0), valid_(valid) {}

  void offer(std::size_t step, const ParamVector& w) {
    if (every_ > 0 && step % every_ == 0) consider(w);
  }

  /// The final parameters always take part in the selection.
  ParamVector result(std::size_t steps, const ParamVector& last) {
    if (every_ == 0) return last;
    if (steps % every_ != 0) consider(last);
    return *best_;
  }

 private:
  void consider(const ParamVector& w) {
    const double ppl = perplexity(cfg_, w, *valid_, Split::Valid).ppl;
    if (!best_ || ppl < best_ppl_) {
      best_ = w;
      best_ppl_ = ppl;
    }
  }

  ModelConfig cfg_;
  std::size_t every_;
  const TokenCorpus* valid_;
  std::optional<ParamVector> best_;
  double best_ppl_ = 0.0;
};

}  // namespace eval_detail

inline const std::vector<std::size_t>& default_ks() {
  static const std::vector<std::size_t> ks{10, 100};
  return ks;
}

/// Student parameters after soft next-token training on materialized syn.
/// `valid` enables validation-based selection (see StudentHyper).
inline ParamVector train_student_on_synthetic(const SyntheticDataset& syn, ModelConfig cfg, const StudentHyper& h,
                                              const TokenCorpus* valid = nullptr) {
  syn.validate();
  cfg.seed = h.seed;
  cfg.validate();
  if (syn.vocab() != cfg.vocab_size) {
    throw ConfigError("synthetic vocab " + std::to_string(syn.vocab()) + " does not match student vocab " +
                      std::to_string(cfg.vocab_size));
  }
  if (syn.xi() > cfg.max_seq_len) {
    throw ConfigError("synthetic sequence length " + std::to_string(syn.xi()) + " exceeds student max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  const Tensor data = materialize_all(syn);
  const BatchSchedule schedule{mix_seed(h.seed, 0x57D), syn.mu(), std::min(h.batch, syn.mu())};
  const SoftNllLoss loss{cfg, {}};
  eval_detail::Selector select(cfg, h, valid);
  AdamState s = AdamState::start(init_params(cfg));
  select.offer(0, s.w);
  for (std::size_t step = 1; step <= h.steps; ++step) {
    const auto batch = optim_detail::select_rows(data, schedule.indices(step));
    s = adam_step(s, optim_detail::gradient_at(loss, s.w, batch, step), h.adam);
    select.offer(step, s.w);
  }
  return select.result(h.steps, s.w);
}

/// Student parameters after hard next-token training on the real train split.
inline ParamVector train_student_on_corpus(const TokenCorpus& corpus, ModelConfig cfg, const StudentHyper& h) {
  cfg.seed = h.seed;
  cfg.validate();
  if (corpus.vocab > cfg.vocab_size) throw ConfigError("corpus vocabulary exceeds the student vocab");
  auto it = batch_iter(corpus, Split::Train, h.batch, cfg.max_seq_len, mix_seed(h.seed, 0xF011));
  eval_detail::Selector select(cfg, h, &corpus);
  AdamState s = AdamState::start(init_params(cfg));
  select.offer(0, s.w);
  for (std::size_t step = 1; step <= h.steps; ++step) {
    const auto hb = it.next();
    HardNllLoss loss{cfg, &hb, mix_seed(h.seed, step), true};
    s = adam_step(s, optim_detail::gradient_at(loss, s.w, Tensor{}, step), h.adam);
    select.offer(step, s.w);
  }
  return select.result(h.steps, s.w);
}

inline MetricReport eval_student_on_synthetic(const SyntheticDataset& syn, const ModelConfig& student,
                                              const StudentHyper& h, const TokenCorpus& corpus,
                                              const std::vector<std::size_t>& ks = default_ks(),
                                              Split split = Split::Test) {
  ModelConfig cfg = student;
  cfg.seed = h.seed;
  return evaluate_model(cfg, train_student_on_synthetic(syn, student, h, &corpus), corpus, split, ks);
}

inline MetricReport eval_student_on_corpus(const TokenCorpus& corpus, const ModelConfig& student,
                                           const StudentHyper& h, const std::vector<std::size_t>& ks = default_ks(),
                                           Split split = Split::Test) {
  ModelConfig cfg = student;
  cfg.seed = h.seed;
  return evaluate_model(cfg, train_student_on_corpus(corpus, student, h), corpus, split, ks);
}

}  // namespace farzi
