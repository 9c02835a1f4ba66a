#pragma once

// Bilevel distillation of token-sequence data into a latent-factorized
// synthetic dataset.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "farzi/corpus.hpp"
#include "farzi/errors.hpp"
#include "farzi/eval.hpp"
#include "farzi/metrics.hpp"
#include "farzi/models.hpp"
#include "farzi/optim.hpp"
#include "farzi/seed.hpp"
#include "farzi/synthetic.hpp"
#include "farzi/trajectory.hpp"

namespace farzi {

/// FarziMM seeds the inner loop from Ω; MM starts from a fresh initialization.
enum class Objective { FarziMM, MM, DC, MTT };
enum class InnerOptimizer { Adam, SGD };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::FarziMM:
      return "farzi";
    case Objective::MM:
      return "mm";
    case Objective::DC:
      return "dc";
    case Objective::MTT:
      return "mtt";
  }
  return "?";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "farzi" || s == "farzi-mm") return Objective::FarziMM;
  if (s == "mm" || s == "mm-sgd") return Objective::MM;
  if (s == "dc") return Objective::DC;
  if (s == "mtt") return Objective::MTT;
  throw ConfigError("unknown objective '" + s + "' (expected farzi, mm, dc or mtt)");
}

inline std::string to_string(InnerOptimizer o) { return o == InnerOptimizer::Adam ? "adam" : "sgd"; }

inline InnerOptimizer parse_inner_optimizer(const std::string& s) {
  if (s == "adam") return InnerOptimizer::Adam;
  if (s == "sgd") return InnerOptimizer::SGD;
  throw ConfigError("unknown inner optimizer '" + s + "' (expected adam or sgd)");
}

struct DistillConfig {
  Objective objective = Objective::FarziMM;
  InnerOptimizer inner = InnerOptimizer::Adam;
  ModelConfig model;    ///< inner-loop learner
  SyntheticShape shape; ///< μ, ξ, d, V, τ
  std::size_t T = 50;
  std::size_t outer_steps = 100;
  std::size_t b = 32;
  std::size_t b_syn = 8;
  double outer_lr = 0.01;
  double outer_weight_decay = 0.0;
  bool freeze_decoder = false;
  AdamHyper inner_adam;
  SgdHyper inner_sgd;
  CheckpointPolicy ckpt;
  std::size_t mtt_m_real = 2;  ///< target offset, in stored checkpoints
  std::size_t mtt_n_syn = 10;  ///< synthetic inner steps
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  ///< 0 disables periodic student evaluation
  StudentHyper eval_hyper;
  std::vector<std::size_t> eval_ks{10, 100};

  void validate() const {
    model.validate();
    inner_adam.validate();
    inner_sgd.validate();
    if (objective != Objective::MTT && T < 1) throw ConfigError("T must be >= 1");
    if (b < 1 || b_syn < 1) throw ConfigError("b and b_syn must be >= 1");
    if (b_syn > shape.mu) {
      throw ConfigError("b_syn (" + std::to_string(b_syn) + ") exceeds the number of synthetic sequences (" +
                        std::to_string(shape.mu) + ")");
    }
    if (shape.vocab != model.vocab_size) throw ConfigError("synthetic vocab must equal the model vocab");
    if (shape.xi > model.max_seq_len) throw ConfigError("synthetic sequence length exceeds model max_seq_len");
    if (shape.xi < 2) throw ConfigError("synthetic sequences need at least two positions");
    if (!(shape.tau > 0.0)) throw ConfigError("temperature must be positive");
    if (!(outer_lr > 0.0)) throw ConfigError("outer_lr must be positive");
    if (!(outer_weight_decay >= 0.0)) throw ConfigError("outer_weight_decay must be non-negative");
  }
};

struct MetaStepReport {
  std::size_t step = 0;
  double meta_loss = 0.0;
  double grad_norm_latent = 0.0;
  double grad_norm_decoder = 0.0;
  double inner_final_loss = 0.0;
  double wall_seconds = 0.0;
  std::size_t peak_bytes = 0;
  std::optional<MetricReport> eval;
};

inline nlohmann::json to_json(const MetaStepReport& r) {
  nlohmann::json j{{"step", r.step},
                   {"meta_loss", r.meta_loss},
                   {"grad_norm_latent", r.grad_norm_latent},
                   {"grad_norm_decoder", r.grad_norm_decoder},
                   {"inner_final_loss", r.inner_final_loss},
                   {"wall_seconds", r.wall_seconds},
                   {"peak_bytes", r.peak_bytes}};
  if (r.eval) j["eval"] = to_json(*r.eval);
  return j;
}

/// Outer Adam over (D̃, M).
struct OuterState {
  AdamState adam;
  AdamHyper hyper;

  static OuterState start(const SyntheticDataset& syn, const DistillConfig& cfg) {
    AdamHyper h;
    h.lr = cfg.outer_lr;
    return {AdamState::start(syn.params()), h};
  }
};

// ----------------------------------------------------------------------------
// Objective pieces
// ----------------------------------------------------------------------------

/// Σ over segments of (1 − cos(a_s, b_s)) and its gradient with respect to
/// b. Segments where either side has zero norm contribute nothing.
struct MatchDistance {
  double value = 0.0;
  ParamVector grad_b;
};

inline MatchDistance gradient_match_distance(const ParamVector& a, const ParamVector& b) {
  a.require_conformal(b, "gradient matching");
  MatchDistance out{0.0, ParamVector::zeros_like(b)};
  for (std::size_t s = 0; s < a.num_segments(); ++s) {
    const auto as = a.segment_values(s);
    const auto bs = b.segment_values(s);
    const double na = l2_norm(as), nb = l2_norm(bs);
    if (na == 0.0 || nb == 0.0) continue;
    const double cos = dot(as, bs) / (na * nb);
    out.value += 1.0 - cos;
    auto g = out.grad_b.segment_values(s);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = -(as[i] / (na * nb) - cos * bs[i] / (nb * nb));
  }
  return out;
}

struct MatchingLoss {
  double value = 0.0;
  ParamVector grad;  ///< with respect to the synthetic end point
};

/// ‖θ_syn − θ_target‖² / ‖θ_target − θ_start‖².
inline MatchingLoss trajectory_matching_loss(const ParamVector& syn_end, const ParamVector& start,
                                             const ParamVector& target) {
  syn_end.require_conformal(target, "trajectory matching");
  start.require_conformal(target, "trajectory matching");
  double den = 0.0;
  for (std::size_t i = 0; i < target.total_len(); ++i) {
    const double d = target.flat()[i] - start.flat()[i];
    den += d * d;
  }
  if (den < 1e-12) {
    throw DegenerateTrajectoryError("trajectory segment has squared length " + std::to_string(den) +
                                    " (< 1e-12); the matching loss is undefined");
  }
  MatchingLoss out{0.0, ParamVector::zeros_like(target)};
  auto g = out.grad.flat();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double d = syn_end.flat()[i] - target.flat()[i];
    out.value += d * d / den;
    g[i] = 2.0 * d / den;
  }
  return out;
}

namespace distill_detail {

inline std::size_t total_checkpoints(const TrajectoryStore& store) {
  std::size_t n = 0;
  for (const auto& t : store.trajectories) n += t.checkpoints.size();
  return n;
}

/// Uniform over every (trajectory, checkpoint) pair, index 0 included.
inline const ParamVector& sample_checkpoint(const TrajectoryStore& store, std::uint64_t seed) {
  const std::size_t n = total_checkpoints(store);
  if (n == 0) throw ConfigError("trajectory store is empty");
  std::mt19937_64 rng(seed);
  std::size_t k = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  for (const auto& t : store.trajectories) {
    if (k < t.checkpoints.size()) return t.checkpoints[k];
    k -= t.checkpoints.size();
  }
  return store.trajectories.back().checkpoints.back();
}

inline HardBatch real_batch(const TokenCorpus& corpus, const ModelConfig& model, std::size_t b, std::uint64_t seed) {
  auto it = batch_iter(corpus, Split::Train, b, model.max_seq_len, seed);
  return it.next();
}

inline ParamVector initial_weights(const DistillConfig& cfg, const TrajectoryStore* store, std::uint64_t seed) {
  if (cfg.objective == Objective::FarziMM) {
    if (!store || store->empty()) throw ConfigError("the farzi objective needs a non-empty trajectory store");
    return sample_checkpoint(*store, seed);
  }
  ModelConfig m = cfg.model;
  m.seed = seed;
  return init_params(m);
}

struct InnerResult {
  Tensor dx;               ///< meta-gradient on the materialized rows
  double meta_loss = 0.0;
  double inner_loss = 0.0;
};

/// Unrolls the inner optimizer from θ0, scores the end point with `outer`
/// (returning value and gradient) and differentiates back to the data.
template <class Outer>
InnerResult unroll_and_reverse(const DistillConfig& cfg, const ParamVector& theta0, const Tensor& data,
                               std::size_t steps, const BatchSchedule& schedule, const Outer& outer) {
  const SoftNllLoss loss{cfg.model, {}};
  InnerResult r;
  if (cfg.inner == InnerOptimizer::Adam) {
    const auto fwd = adam_unroll(theta0, loss, data, steps, cfg.inner_adam, cfg.ckpt, schedule);
    const auto [value, grad] = outer(fwd.final.w);
    r.meta_loss = value;
    r.inner_loss = fwd.last_loss;
    r.dx = adam_reverse(fwd.final, grad, loss, data, steps, cfg.inner_adam, cfg.ckpt, fwd.checkpoints, schedule).dx;
  } else {
    const auto fwd = sgd_unroll(theta0, loss, data, steps, cfg.inner_sgd, cfg.ckpt, schedule);
    const auto [value, grad] = outer(fwd.final.w);
    r.meta_loss = value;
    r.inner_loss = fwd.last_loss;
    r.dx = sgd_reverse(fwd, grad, loss, data, steps, cfg.inner_sgd, cfg.ckpt, schedule).dx;
  }
  return r;
}

}  // namespace distill_detail

/// Applies one outer Adam step given the data gradient on the materialized
/// rows. Returns the gradient norms (‖dD̃‖, ‖dM‖) before weight decay.
inline std::pair<double, double> apply_meta_gradient(SyntheticDataset& syn, OuterState& outer, const Tensor& probs,
                                                     const Tensor& dprobs, const DistillConfig& cfg) {
  auto g = materialize_backward(syn, probs, dprobs);
  if (cfg.freeze_decoder) g.decoder = Tensor(syn.decoder.shape());
  const double n_latent = l2_norm(g.latent.flat()), n_decoder = l2_norm(g.decoder.flat());
  if (!std::isfinite(n_latent) || !std::isfinite(n_decoder)) {
    throw NumericError("meta-gradient", "non-finite meta-gradient");
  }
  ParamVector grad({{"latent", g.latent}, {"decoder", g.decoder}});
  if (cfg.outer_weight_decay > 0.0) {
    auto gf = grad.flat();
    const auto wf = outer.adam.w.flat();
    const std::size_t dec_begin = grad.segment(1).offset;
    for (std::size_t i = 0; i < gf.size(); ++i) {
      if (cfg.freeze_decoder && i >= dec_begin) continue;
      gf[i] += cfg.outer_weight_decay * wf[i];
    }
  }
  outer.adam = adam_step(outer.adam, grad, outer.hyper);
  syn.set_params(outer.adam.w);
  return {n_latent, n_decoder};
}

struct MetaGradient {
  double meta_loss = 0.0;
  double inner_loss = 0.0;
  Tensor probs;   ///< materialized rows
  Tensor dprobs;  ///< meta-gradient on them
};

/// Meta-matching objective: train on syn from θ0 for T steps, score the end
/// point on a real batch, and differentiate back to the materialized rows.
inline MetaGradient mm_meta_gradient(const SyntheticDataset& syn, const DistillConfig& cfg, const ParamVector& theta0,
                                     const HardBatch& real, const BatchSchedule& schedule) {
  MetaGradient out;
  out.probs = materialize_all(syn);
  auto outer_loss = [&](const ParamVector& w) {
    const auto g = ad::value_and_grad(HardNllLoss{cfg.model, &real}, w);
    return std::pair<double, ParamVector>{g.value, g.grad};
  };
  auto r = distill_detail::unroll_and_reverse(cfg, theta0, out.probs, cfg.T, schedule, outer_loss);
  out.meta_loss = r.meta_loss;
  out.inner_loss = r.inner_loss;
  out.dprobs = std::move(r.dx);
  return out;
}

/// One meta-matching step. θ0 comes from Ω for FarziMM and from a fresh
/// initialization for MM.
inline MetaStepReport mm_meta_step(SyntheticDataset& syn, const DistillConfig& cfg, const TokenCorpus& corpus,
                                   const TrajectoryStore* store, OuterState& outer, std::size_t step) {
  const std::uint64_t s = mix_seed(cfg.seed, step);
  const ParamVector theta0 = distill_detail::initial_weights(cfg, store, mix_seed(s, 1));
  const BatchSchedule schedule{mix_seed(s, 2), syn.mu(), cfg.b_syn};
  const HardBatch hb = distill_detail::real_batch(corpus, cfg.model, cfg.b, mix_seed(s, 3));
  const auto g = mm_meta_gradient(syn, cfg, theta0, hb, schedule);
  MetaStepReport rep;
  rep.step = step;
  rep.meta_loss = g.meta_loss;
  rep.inner_final_loss = g.inner_loss;
  std::tie(rep.grad_norm_latent, rep.grad_norm_decoder) = apply_meta_gradient(syn, outer, g.probs, g.dprobs, cfg);
  return rep;
}

/// Gradient matching along a synthetic-data trajectory. θ_t is treated as a
/// constant when differentiating the per-step distance.
inline MetaStepReport dc_meta_step(SyntheticDataset& syn, const DistillConfig& cfg, const TokenCorpus& corpus,
                                   OuterState& outer, std::size_t step) {
  const std::uint64_t s = mix_seed(cfg.seed, step);
  ModelConfig m = cfg.model;
  m.seed = mix_seed(s, 1);
  ParamVector theta = init_params(m);
  const Tensor probs = materialize_all(syn);
  const BatchSchedule schedule{mix_seed(s, 2), syn.mu(), cfg.b_syn};
  const SoftNllLoss loss{cfg.model, {}};
  Tensor dx(probs.shape());
  AdamState adam = AdamState::start(theta);
  SgdState sgd = SgdState::start(theta);
  MetaStepReport rep;
  rep.step = step;
  for (std::size_t t = 1; t <= cfg.T; ++t) {
    const HardBatch hb = distill_detail::real_batch(corpus, cfg.model, cfg.b, mix_seed(s, 100 + t));
    const auto g_real = ad::value_and_grad(HardNllLoss{cfg.model, &hb}, theta).grad;
    const auto rows = schedule.indices(t);
    const auto batch = optim_detail::select_rows(probs, rows);
    const auto g_syn = ad::value_and_grad(loss, theta, batch);
    const auto dist = gradient_match_distance(g_real, g_syn.grad);
    rep.meta_loss += dist.value;
    rep.inner_final_loss = g_syn.value;
    optim_detail::scatter_add_rows(dx, ad::second_order(loss, theta, batch, dist.grad_b).hvp_data, rows, 1.0);
    if (cfg.inner == InnerOptimizer::Adam) {
      adam = adam_step(adam, g_syn.grad, cfg.inner_adam);
      theta = adam.w;
    } else {
      sgd = sgd_step(sgd, g_syn.grad, cfg.inner_sgd);
      theta = sgd.w;
    }
  }
  std::tie(rep.grad_norm_latent, rep.grad_norm_decoder) = apply_meta_gradient(syn, outer, probs, dx, cfg);
  return rep;
}

/// Trajectory matching: N_syn synthetic steps from a stored θ_t should land
/// on the stored θ_{t+M}.
inline MetaStepReport mtt_meta_step(SyntheticDataset& syn, const DistillConfig& cfg, const TokenCorpus&,
                                    const TrajectoryStore* store, OuterState& outer, std::size_t step) {
  if (!store || store->empty()) throw ConfigError("the mtt objective needs a non-empty trajectory store");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < store->trajectories.size(); ++i) {
    if (store->trajectories[i].checkpoints.size() >= cfg.mtt_m_real + 1) eligible.push_back(i);
  }
  if (eligible.empty()) {
    throw ConfigError("no trajectory has the " + std::to_string(cfg.mtt_m_real + 1) + " checkpoints mtt needs");
  }
  const std::uint64_t s = mix_seed(cfg.seed, step);
  std::mt19937_64 rng(mix_seed(s, 1));
  const auto& tr = store->trajectories[eligible[std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng)]];
  const std::size_t t = std::uniform_int_distribution<std::size_t>(0, tr.checkpoints.size() - 1 - cfg.mtt_m_real)(rng);
  const ParamVector& start = tr.checkpoints[t];
  const ParamVector& target = tr.checkpoints[t + cfg.mtt_m_real];
  const Tensor probs = materialize_all(syn);
  const BatchSchedule schedule{mix_seed(s, 2), syn.mu(), cfg.b_syn};
  auto outer_loss = [&](const ParamVector& w) {
    const auto l = trajectory_matching_loss(w, start, target);
    return std::pair<double, ParamVector>{l.value, l.grad};
  };
  // validates the denominator before any inner work
  (void)trajectory_matching_loss(start, start, target);
  const auto r = distill_detail::unroll_and_reverse(cfg, start, probs, cfg.mtt_n_syn, schedule, outer_loss);
  MetaStepReport rep;
  rep.step = step;
  rep.meta_loss = r.meta_loss;
  rep.inner_final_loss = r.inner_loss;
  std::tie(rep.grad_norm_latent, rep.grad_norm_decoder) = apply_meta_gradient(syn, outer, probs, r.dx, cfg);
  return rep;
}

// ----------------------------------------------------------------------------
// Driver
// ----------------------------------------------------------------------------

struct DistillResult {
  SyntheticDataset syn;
  std::vector<MetaStepReport> reports;
  std::vector<double> singular_values;  ///< of D̃·M at the end
  std::size_t rank = 0;                 ///< numerical rank at 1e-8 relative
};

/// A meta-step failed. Carries the synthetic data as of the last completed
/// step and the original error.
class DistillFailure : public Error {
 public:
  DistillFailure(const std::string& what, std::size_t step, SyntheticDataset partial, std::exception_ptr cause)
      : Error("distillation failed at outer step " + std::to_string(step) + ": " + what),
        step_(step),
        partial_(std::move(partial)),
        cause_(std::move(cause)) {}
  std::size_t step() const noexcept { return step_; }
  const SyntheticDataset& partial() const noexcept { return partial_; }
  [[noreturn]] void rethrow_cause() const { std::rethrow_exception(cause_); }

 private:
  std::size_t step_;
  SyntheticDataset partial_;
  std::exception_ptr cause_;
};

/// Initial (D̃, M). The decoder starts from the teacher embedding of the
/// first stored trajectory's last checkpoint when its width matches d.
inline SyntheticDataset initial_synthetic(const DistillConfig& cfg, const TrajectoryStore* store) {
  std::optional<Tensor> teacher;
  if (store && !store->empty() && store->model_config.embed_dim == cfg.shape.dim) {
    teacher = store->trajectories.front().checkpoints.back().segment_tensor("embed");
  }
  return init_synthetic(cfg.shape, mix_seed(cfg.seed, 0x5E7), teacher ? &*teacher : nullptr);
}

inline DistillResult distill(const DistillConfig& cfg, const TokenCorpus& corpus, const TrajectoryStore* store,
                             const std::function<void(const MetaStepReport&)>& on_report = {}) {
  cfg.validate();
  if (store && !store->empty()) store->require_conformal(cfg.model);
  if (corpus.vocab > cfg.model.vocab_size) throw ConfigError("corpus vocabulary exceeds the model vocab");
  if (corpus.split(Split::Train).empty()) throw ConfigError("training split is empty");
  if (cfg.objective == Objective::FarziMM || cfg.objective == Objective::MTT) {
    if (!store || store->empty()) throw ConfigError("objective " + to_string(cfg.objective) + " needs a trajectory store");
  }
  if (cfg.objective == Objective::MTT && cfg.mtt_n_syn == 0 && cfg.mtt_m_real == 0) {
    throw DegenerateTrajectoryError("mtt with N_syn = 0 and M_real = 0 matches a point to itself (0/0)");
  }

  DistillResult result{initial_synthetic(cfg, store), {}, {}, 0};
  OuterState outer = OuterState::start(result.syn, cfg);
  for (std::size_t step = 1; step <= cfg.outer_steps; ++step) {
    const SyntheticDataset before = result.syn;
    const auto t0 = std::chrono::steady_clock::now();
    MetaStepReport rep;
    try {
      PeakMemoryScope mem;
      switch (cfg.objective) {
        case Objective::FarziMM:
        case Objective::MM:
          rep = mm_meta_step(result.syn, cfg, corpus, store, outer, step);
          break;
        case Objective::DC:
          rep = dc_meta_step(result.syn, cfg, corpus, outer, step);
          break;
        case Objective::MTT:
          rep = mtt_meta_step(result.syn, cfg, corpus, store, outer, step);
          break;
      }
      rep.peak_bytes = mem.peak_bytes();
      rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.outer_steps)) {
        rep.eval = eval_student_on_synthetic(result.syn, cfg.model, cfg.eval_hyper, corpus, cfg.eval_ks, Split::Valid);
      }
    } catch (const std::exception& e) {
      throw DistillFailure(e.what(), step, before, std::current_exception());
    }
    if (on_report) on_report(rep);
    result.reports.push_back(std::move(rep));
  }
  result.singular_values = logit_singular_values(result.syn);
  const double top = result.singular_values.empty() ? 0.0 : result.singular_values.front();
  for (double sv : result.singular_values) result.rank += top > 0.0 && sv > 1e-8 * top;
  if (result.rank > cfg.shape.dim) {
    std::clog << "warning: logit matrix has numerical rank " << result.rank << " > d = " << cfg.shape.dim << "\n";
  }
  return result;
}

}  // namespace farzi
