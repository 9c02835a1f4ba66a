#pragma once

// Inner-loop optimizers and their reverse-mode differentiation.
//
// Adam is reversed in constant memory: the trajectory is reconstructed
// backwards from (w_T, m_T, v_T), recomputing each step's gradient, while
// meta-gradients with respect to w_0, m_0 and the training data are
// accumulated with Hessian-vector products. Periodic snapshots bound the
// finite-precision drift of the reconstruction.
//
// SGD with momentum is reversed exactly by checkpoint-and-replay.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "farzi/autodiff.hpp"
#include "farzi/errors.hpp"
#include "farzi/seed.hpp"
#include "farzi/tensor.hpp"

namespace farzi {

struct AdamHyper {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("adam: learning rate must be > 0");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("adam: beta1 must lie in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("adam: beta2 must lie in (0, 1)");
    if (!(eps > 0.0)) throw ConfigError("adam: eps must be > 0");
  }
};

struct AdamState {
  ParamVector w;
  ParamVector m;
  ParamVector v;
  std::size_t t = 0;

  static AdamState start(const ParamVector& w0) {
    return {w0, ParamVector::zeros_like(w0), ParamVector::zeros_like(w0), 0};
  }
  bool operator==(const AdamState&) const = default;
};

struct SgdHyper {
  double lr = 0.01;
  double momentum = 0.0;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("sgd: learning rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("sgd: momentum must lie in [0, 1)");
  }
};

/// Heavy-ball state: `buf` is the velocity b_t = momentum·b_{t−1} + g_t.
struct SgdState {
  ParamVector w;
  ParamVector buf;
  std::size_t t = 0;

  static SgdState start(const ParamVector& w0) { return {w0, ParamVector::zeros_like(w0), 0}; }
  bool operator==(const SgdState&) const = default;
};

/// Interval between stored optimizer snapshots; 0 disables them.
struct CheckpointPolicy {
  std::size_t interval = 25;
  bool is_checkpoint(std::size_t step) const { return interval > 0 && step % interval == 0; }
};

struct ReverseResult {
  ParamVector dw0;
  ParamVector dm0;
  Tensor dx;
};

/// Drift between a reconstructed state and its stored snapshot.
struct DriftRecord {
  std::size_t step = 0;
  double max_abs = 0.0;
};

// ----------------------------------------------------------------------------
// Mini-batch schedule
// ----------------------------------------------------------------------------

/// Deterministic rows-per-step sampler over the first axis of the training
/// data. The same step always yields the same rows, which is what lets the
/// reverse pass recompute the forward gradient exactly.
struct BatchSchedule {
  std::uint64_t seed = 0;
  std::size_t rows = 0;
  std::size_t batch = 0;

  std::vector<std::size_t> indices(std::size_t step) const {
    std::vector<std::size_t> idx(rows);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (batch >= rows) return idx;
    std::mt19937_64 rng(mix_seed(seed, step));
    for (std::size_t i = 0; i < batch; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, rows - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(batch);
    return idx;
  }

  static BatchSchedule full(std::size_t rows) { return {0, rows, rows}; }
};

namespace optim_detail {

inline Tensor select_rows(const Tensor& data, const std::vector<std::size_t>& rows) {
  if (data.empty()) return data;
  Shape shape = data.shape();
  const std::size_t stride = data.size() / shape[0];
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(data.data() + rows[r] * stride, stride, out.data() + r * stride);
  }
  return out;
}

inline void scatter_add_rows(Tensor& dst, const Tensor& src, const std::vector<std::size_t>& rows, double scale) {
  if (dst.empty()) return;
  const std::size_t stride = dst.size() / dst.dim(0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    double* d = dst.data() + rows[r] * stride;
    const double* s = src.data() + r * stride;
    for (std::size_t i = 0; i < stride; ++i) d[i] += scale * s[i];
  }
}

template <ad::DifferentiableLoss F>
ParamVector gradient_at(const F& loss, const ParamVector& w, const Tensor& batch, std::size_t step) {
  try {
    return ad::value_and_grad(loss, w, batch).grad;
  } catch (const NumericError& e) {
    throw NumericError("step " + std::to_string(step), e.what());
  }
}

inline double pow_int(double base, std::size_t e) { return std::pow(base, static_cast<double>(e)); }

}  // namespace optim_detail

// ----------------------------------------------------------------------------
// Adam
// ----------------------------------------------------------------------------

/// One Adam update, square-root form: w ← w − α·m̂/(√v̂ + ε).
inline AdamState adam_step(const AdamState& state, const ParamVector& grad, const AdamHyper& h) {
  state.w.require_conformal(grad, "adam_step");
  grad.require_finite("adam_step gradient");
  AdamState next = state;
  next.t = state.t + 1;
  const double bc1 = 1.0 - optim_detail::pow_int(h.beta1, next.t);
  const double bc2 = 1.0 - optim_detail::pow_int(h.beta2, next.t);
  auto g = grad.flat();
  auto w = next.w.flat();
  auto m = next.m.flat();
  auto v = next.v.flat();
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    w[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
  }
  return next;
}

struct AdamUnrollResult {
  AdamState final;
  std::vector<AdamState> checkpoints;  ///< snapshots at steps 0, C, 2C, … < T
  double last_loss = 0.0;              ///< inner loss at the last step's input
};

/// T forward Adam steps on the rows of `data` chosen by `schedule`.
template <ad::DifferentiableLoss F>
AdamUnrollResult adam_unroll(const AdamState& initial, const F& loss, const Tensor& data, std::size_t T,
                             const AdamHyper& hyper, const CheckpointPolicy& ckpt, const BatchSchedule& schedule) {
  hyper.validate();
  AdamUnrollResult r{initial, {}, 0.0};
  for (std::size_t step = 1; step <= T; ++step) {
    if (ckpt.is_checkpoint(step - 1)) r.checkpoints.push_back(r.final);
    const auto rows = schedule.indices(step);
    const auto batch = optim_detail::select_rows(data, rows);
    ad::GradResult g;
    try {
      g = ad::value_and_grad(loss, r.final.w, batch);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step), e.what());
    }
    r.last_loss = g.value;
    r.final = adam_step(r.final, g.grad, hyper);
  }
  return r;
}

template <ad::DifferentiableLoss F>
AdamUnrollResult adam_unroll(const ParamVector& w0, const F& loss, const Tensor& data, std::size_t T,
                             const AdamHyper& hyper, const CheckpointPolicy& ckpt, const BatchSchedule& schedule) {
  return adam_unroll(AdamState::start(w0), loss, data, T, hyper, ckpt, schedule);
}

/// Test hook for mutation checks of the reverse pass.
enum class ReverseFault { None, FlipMomentJacobianSign };

struct AdamReverseOptions {
  double drift_tol = 1e-3;  ///< hard failure
  double drift_warn = 1e-5;
  /// Called with every reconstructed state (t−1) before any snapshot
  /// replacement. Used for drift diagnostics.
  std::function<void(const AdamState&)> observer;
  std::vector<DriftRecord>* drift_log = nullptr;
  ReverseFault fault = ReverseFault::None;
};

/// Reverse-mode differentiation of an Adam trajectory in constant memory.
///
/// Walks t = T..1 reconstructing (w_{t−1}, m_{t−1}, v_{t−1}) from
/// (w_t, m_t, v_t) and the recomputed gradient g_t, and accumulates
///
///   dm += α'·(β'·m_t·g_t / (√v_t·(√v_t + ε')²) − 1/(√v_t + ε'))·dw
///   dw += (1−β₁)·(∇_w∇_w L)·dm
///   dx += (1−β₁)·(∇_x∇_w L)ᵀ·dm
///   dm  = β₁·dm
///
/// with ε' = ε√(1−β₂ᵗ), α' = α√(1−β₂ᵗ)/(1−β₁ᵗ), β' = (1−β₂)/(1−β₁). The
/// second-moment path is folded into dm through ∂v_t/∂m_t = 2β'g_t; there is
/// no dv accumulator, so the result is exact only for T = 1.
///
/// At every step that has a snapshot in `checkpoints`, the reconstructed
/// state is compared against it (ReversalDriftError above drift_tol) and
/// then replaced by it.
template <ad::DifferentiableLoss F>
ReverseResult adam_reverse(const AdamState& final, const ParamVector& dL_dwT, const F& loss, const Tensor& data,
                           std::size_t T, const AdamHyper& h, const CheckpointPolicy& ckpt,
                           const std::vector<AdamState>& checkpoints, const BatchSchedule& schedule,
                           const AdamReverseOptions& opts = {}) {
  h.validate();
  final.w.require_conformal(dL_dwT, "adam_reverse");
  if (final.t < T) throw ConfigError("adam_reverse: final state is at step " + std::to_string(final.t));
  const std::size_t t0 = final.t - T;

  ReverseResult r{dL_dwT, ParamVector::zeros_like(final.w), data.empty() ? Tensor{} : Tensor(data.shape())};
  AdamState s = final;
  auto& dw = r.dw0;
  auto& dm = r.dm0;
  ParamVector w_prev = final.w;

  const double beta_p = (1.0 - h.beta2) / (1.0 - h.beta1);
  const double sign = opts.fault == ReverseFault::FlipMomentJacobianSign ? -1.0 : 1.0;

  for (std::size_t local = T; local >= 1; --local) {
    const std::size_t t = t0 + local;  // global Adam step counter
    const double bc1 = 1.0 - optim_detail::pow_int(h.beta1, t);
    const double bc2 = 1.0 - optim_detail::pow_int(h.beta2, t);

    // exactly reverse Adam
    auto w = w_prev.flat();
    {
      auto m = s.m.flat();
      auto v = s.v.flat();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] += h.lr * mhat / (std::sqrt(vhat) + h.eps);
      }
    }
    const auto rows = schedule.indices(local);
    const auto batch = optim_detail::select_rows(data, rows);
    const ParamVector g = optim_detail::gradient_at(loss, w_prev, batch, t);

    const double eps_p = h.eps * std::sqrt(bc2);
    const double alpha_p = h.lr * std::sqrt(bc2) / bc1;
    {
      auto m = s.m.flat();
      auto v = s.v.flat();
      auto gf = g.flat();
      auto dmf = dm.flat();
      auto dwf = dw.flat();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double sv = std::sqrt(v[i]);
        const double denom = sv + eps_p;
        const double vterm = sv > 0.0 ? beta_p * m[i] * gf[i] / (sv * denom * denom) : 0.0;
        dmf[i] += sign * alpha_p * (vterm - 1.0 / denom) * dwf[i];
      }
      // reconstruct m_{t-1}, v_{t-1}
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = (m[i] - (1.0 - h.beta1) * gf[i]) / h.beta1;
        double vp = (v[i] - (1.0 - h.beta2) * gf[i] * gf[i]) / h.beta2;
        if (vp < 0.0) {
          // large both absolutely and relative to the terms being subtracted
          const double scale = v[i] + (1.0 - h.beta2) * gf[i] * gf[i];
          if (-vp > 1e-12 && -vp > opts.drift_tol * scale) throw ReversalDriftError(t - 1, -vp / scale);
          vp = 0.0;
        }
        v[i] = vp;
      }
    }
    s.t = t - 1;

    ad::SecondOrderResult so;
    try {
      so = ad::second_order(loss, w_prev, batch, dm);
    } catch (const NumericError& e) {
      throw NumericError("reverse step " + std::to_string(t), e.what());
    }
    {
      auto dwf = dw.flat();
      auto hv = so.hvp_param.flat();
      for (std::size_t i = 0; i < dwf.size(); ++i) dwf[i] += (1.0 - h.beta1) * hv[i];
    }
    optim_detail::scatter_add_rows(r.dx, so.hvp_data, rows, 1.0 - h.beta1);
    for (auto& x : dm.flat()) x *= h.beta1;

    s.w = w_prev;
    if (opts.observer) opts.observer(s);

    const std::size_t local_prev = local - 1;
    if (ckpt.is_checkpoint(local_prev)) {
      const std::size_t k = local_prev / ckpt.interval;
      if (k < checkpoints.size()) {
        const AdamState& snap = checkpoints[k];
        double drift = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
          drift = std::max({drift, std::abs(s.w.flat()[i] - snap.w.flat()[i]), std::abs(s.m.flat()[i] - snap.m.flat()[i]),
                            std::abs(s.v.flat()[i] - snap.v.flat()[i])});
        }
        if (opts.drift_log) opts.drift_log->push_back({local_prev, drift});
        if (drift > opts.drift_tol) throw ReversalDriftError(local_prev, drift);
        if (drift > opts.drift_warn) {
          std::clog << "warning: reversal drift " << drift << " at step " << local_prev << "\n";
        }
        s = snap;
        w_prev = snap.w;
      }
    }
  }
  return r;
}

// ----------------------------------------------------------------------------
// SGD with momentum
// ----------------------------------------------------------------------------

inline SgdState sgd_step(const SgdState& state, const ParamVector& grad, const SgdHyper& h) {
  state.w.require_conformal(grad, "sgd_step");
  grad.require_finite("sgd_step gradient");
  SgdState next = state;
  next.t = state.t + 1;
  auto g = grad.flat();
  auto w = next.w.flat();
  auto b = next.buf.flat();
  for (std::size_t i = 0; i < w.size(); ++i) {
    b[i] = h.momentum * b[i] + g[i];
    w[i] -= h.lr * b[i];
  }
  return next;
}

struct SgdUnrollResult {
  SgdState final;
  std::vector<SgdState> checkpoints;  ///< always holds step 0; then every C steps
  double last_loss = 0.0;
};

template <ad::DifferentiableLoss F>
SgdUnrollResult sgd_unroll(const SgdState& initial, const F& loss, const Tensor& data, std::size_t T,
                           const SgdHyper& hyper, const CheckpointPolicy& ckpt, const BatchSchedule& schedule) {
  hyper.validate();
  SgdUnrollResult r{initial, {}, 0.0};
  r.checkpoints.push_back(initial);
  for (std::size_t step = 1; step <= T; ++step) {
    if (step > 1 && ckpt.is_checkpoint(step - 1)) r.checkpoints.push_back(r.final);
    const auto batch = optim_detail::select_rows(data, schedule.indices(step));
    ad::GradResult g;
    try {
      g = ad::value_and_grad(loss, r.final.w, batch);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step), e.what());
    }
    r.last_loss = g.value;
    r.final = sgd_step(r.final, g.grad, hyper);
  }
  return r;
}

template <ad::DifferentiableLoss F>
SgdUnrollResult sgd_unroll(const ParamVector& w0, const F& loss, const Tensor& data, std::size_t T,
                           const SgdHyper& hyper, const CheckpointPolicy& ckpt, const BatchSchedule& schedule) {
  return sgd_unroll(SgdState::start(w0), loss, data, T, hyper, ckpt, schedule);
}

/// Exact reverse of heavy-ball SGD. Each checkpoint segment is replayed
/// forward from its snapshot and then differentiated backwards, so memory is
/// O(C·|w|). With C = 0 the whole trajectory forms one segment.
template <ad::DifferentiableLoss F>
ReverseResult sgd_reverse(const SgdUnrollResult& forward, const ParamVector& dL_dwT, const F& loss,
                          const Tensor& data, std::size_t T, const SgdHyper& h, const CheckpointPolicy& ckpt,
                          const BatchSchedule& schedule) {
  h.validate();
  forward.final.w.require_conformal(dL_dwT, "sgd_reverse");
  if (forward.checkpoints.empty()) throw ConfigError("sgd_reverse: missing initial snapshot");
  const std::size_t seg_len = ckpt.interval > 0 ? ckpt.interval : std::max<std::size_t>(T, 1);

  ReverseResult r{dL_dwT, ParamVector::zeros_like(dL_dwT), data.empty() ? Tensor{} : Tensor(data.shape())};
  auto& dw = r.dw0;
  auto& db = r.dm0;
  if (T == 0) return r;

  const std::size_t n_seg = (T + seg_len - 1) / seg_len;
  for (std::size_t k = n_seg; k-- > 0;) {
    const std::size_t begin = k * seg_len;
    const std::size_t end = std::min(T, begin + seg_len);
    if (k >= forward.checkpoints.size()) throw ConfigError("sgd_reverse: checkpoint list does not match policy");
    // replay: states[j] is the state before step begin+j+1
    std::vector<SgdState> states;
    states.reserve(end - begin);
    SgdState s = forward.checkpoints[k];
    for (std::size_t step = begin + 1; step <= end; ++step) {
      states.push_back(s);
      if (step == end) break;
      const auto batch = optim_detail::select_rows(data, schedule.indices(step));
      s = sgd_step(s, optim_detail::gradient_at(loss, s.w, batch, step), h);
    }
    for (std::size_t step = end; step > begin; --step) {
      const SgdState& prev = states[step - begin - 1];
      const auto rows = schedule.indices(step);
      const auto batch = optim_detail::select_rows(data, rows);
      auto dbf = db.flat();
      auto dwf = dw.flat();
      for (std::size_t i = 0; i < dbf.size(); ++i) dbf[i] -= h.lr * dwf[i];
      ad::SecondOrderResult so;
      try {
        so = ad::second_order(loss, prev.w, batch, db);
      } catch (const NumericError& e) {
        throw NumericError("reverse step " + std::to_string(step), e.what());
      }
      auto hv = so.hvp_param.flat();
      for (std::size_t i = 0; i < dwf.size(); ++i) dwf[i] += hv[i];
      optim_detail::scatter_add_rows(r.dx, so.hvp_data, rows, 1.0);
      for (auto& x : dbf) x *= h.momentum;
    }
  }
  return r;
}

}  // namespace farzi
