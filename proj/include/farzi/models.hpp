#pragma once

// Tiny autoregressive next-token models. Every architecture consumes either
// hard token ids or soft rows (probability vectors over the vocabulary); a
// soft row enters the model as its distribution-weighted embedding.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "farzi/autodiff.hpp"
#include "farzi/errors.hpp"
#include "farzi/tensor.hpp"

namespace farzi {

enum class Arch { EmbedSoftmax, CausalAttention1L, RecurrentGate };

inline std::string to_string(Arch a) {
  switch (a) {
    case Arch::EmbedSoftmax:
      return "embed";
    case Arch::CausalAttention1L:
      return "attention";
    case Arch::RecurrentGate:
      return "recurrent";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "embed" || s == "EmbedSoftmax") return Arch::EmbedSoftmax;
  if (s == "attention" || s == "CausalAttention1L") return Arch::CausalAttention1L;
  if (s == "recurrent" || s == "RecurrentGate") return Arch::RecurrentGate;
  throw ConfigError("unknown architecture '" + s + "' (expected embed, attention or recurrent)");
}

struct ModelConfig {
  std::size_t vocab_size = 16;
  std::size_t embed_dim = 8;
  Arch arch = Arch::EmbedSoftmax;
  std::size_t max_seq_len = 8;
  double dropout = 0.0;  ///< full-data training only
  std::uint64_t seed = 0;

  void validate() const {
    if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (max_seq_len < 2) throw ConfigError("max_seq_len must be >= 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  }
  bool operator==(const ModelConfig&) const = default;
};

/// Sequences of distributions over tokens. `probs` has shape (b, len, V).
struct SoftBatch {
  Tensor probs;
  std::vector<std::uint8_t> mask;  ///< b·len flags; empty means all valid

  std::size_t batch() const { return probs.dim(0); }
  std::size_t length() const { return probs.dim(1); }
  std::size_t vocab() const { return probs.dim(2); }
};

/// Token ids (b, len) row-major; masked positions hold -1.
struct HardBatch {
  std::vector<std::int64_t> tokens;
  std::vector<std::uint8_t> mask;
  std::size_t batch = 0;
  std::size_t length = 0;
};

inline SoftBatch one_hot(const HardBatch& hb, std::size_t vocab) {
  SoftBatch sb{Tensor({hb.batch, hb.length, vocab}), hb.mask};
  for (std::size_t i = 0; i < hb.tokens.size(); ++i) {
    if (hb.mask[i] && hb.tokens[i] >= 0) sb.probs[i * vocab + static_cast<std::size_t>(hb.tokens[i])] = 1.0;
  }
  return sb;
}

namespace model_detail {

/// Weight of the prediction made at position i: both i and i+1 must be valid.
inline std::vector<double> target_weights(const std::vector<std::uint8_t>& mask, std::size_t b, std::size_t len) {
  std::vector<double> w;
  w.reserve(b * (len - 1));
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t i = 0; i + 1 < len; ++i) {
      const bool ok = mask.empty() || (mask[s * len + i] && mask[s * len + i + 1]);
      w.push_back(ok ? 1.0 : 0.0);
    }
  }
  return w;
}

inline std::vector<std::size_t> rows_range(std::size_t b, std::size_t len, std::size_t first, std::size_t last) {
  std::vector<std::size_t> rows;
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t i = first; i < last; ++i) rows.push_back(s * len + i);
  }
  return rows;
}

inline void check_layout(const ModelConfig& cfg, std::size_t num_vars) {
  const std::size_t expected = cfg.arch == Arch::EmbedSoftmax ? 2 : cfg.arch == Arch::CausalAttention1L ? 7 : 8;
  if (num_vars != expected) {
    throw ShapeError("parameter vector has " + std::to_string(num_vars) + " segments, " + to_string(cfg.arch) +
                     " expects " + std::to_string(expected));
  }
}

/// Hidden states (b·len, d) from input embeddings (b·len, d).
template <ad::Scalar S>
ad::Var<S> encode(ad::Tape<S>& tape, const ModelConfig& cfg, const std::vector<ad::Var<S>>& p, ad::Var<S> emb,
                  std::size_t b, std::size_t len) {
  const std::size_t d = cfg.embed_dim;
  switch (cfg.arch) {
    case Arch::EmbedSoftmax:
      return emb;
    case Arch::CausalAttention1L: {
      // segments: embed, pos, wq, wk, wv, wo, out
      if (len > cfg.max_seq_len) throw ShapeError("sequence longer than max_seq_len");
      std::vector<std::size_t> pos_rows;
      for (std::size_t s = 0; s < b; ++s) {
        for (std::size_t i = 0; i < len; ++i) pos_rows.push_back(i);
      }
      auto x0 = ad::add(emb, ad::take_rows(p[1], std::move(pos_rows)));
      auto a = ad::layer_norm_rows(x0);
      auto q = ad::matmul(a, p[2]);
      auto k = ad::matmul(a, p[3]);
      auto v = ad::matmul(a, p[4]);
      const double scale = 1.0 / std::sqrt(static_cast<double>(d));
      std::vector<ad::Var<S>> heads;
      heads.reserve(b);
      for (std::size_t s = 0; s < b; ++s) {
        auto rows = rows_range(1, len, 0, len);
        for (auto& r : rows) r += s * len;
        auto qs = ad::take_rows(q, rows);
        auto ks = ad::take_rows(k, rows);
        auto vs = ad::take_rows(v, rows);
        auto att = ad::causal_softmax(ad::affine(ad::matmul_nt(qs, ks), scale));
        heads.push_back(ad::matmul(att, vs));
      }
      return ad::add(x0, ad::matmul(ad::concat_rows(heads), p[5]));
    }
    case Arch::RecurrentGate: {
      // segments: embed, uz, wz, bz, ux, wh, bh, out
      auto h = tape.constant(BasicTensor<S>({b, d}));
      std::vector<ad::Var<S>> states;
      states.reserve(len);
      for (std::size_t i = 0; i < len; ++i) {
        std::vector<std::size_t> rows;
        for (std::size_t s = 0; s < b; ++s) rows.push_back(s * len + i);
        auto e = ad::take_rows(emb, std::move(rows));
        auto z = ad::sigmoid(ad::add_bias(ad::add(ad::matmul(e, p[1]), ad::matmul(h, p[2])), p[3]));
        auto c = ad::tanh(ad::add_bias(ad::add(ad::matmul(e, p[4]), ad::matmul(h, p[5])), p[6]));
        h = ad::add(h, ad::mul(z, ad::sub(c, h)));
        states.push_back(h);
      }
      // time-major -> sequence-major
      std::vector<std::size_t> order;
      for (std::size_t s = 0; s < b; ++s) {
        for (std::size_t i = 0; i < len; ++i) order.push_back(i * b + s);
      }
      return ad::take_rows(ad::concat_rows(states), std::move(order));
    }
  }
  throw ConfigError("unknown architecture");
}

template <ad::Scalar S>
ad::Var<S> dropout(ad::Tape<S>& tape, ad::Var<S> x, double rate, std::mt19937_64* rng) {
  if (rate <= 0.0 || rng == nullptr) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  BasicTensor<S> m(x.shape());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = keep(*rng) ? S(1.0 / (1.0 - rate)) : S(0.0);
  return ad::mul(x, tape.constant(std::move(m)));
}

/// Logits (b·(len−1), V) predicting positions 1..len−1 from embeddings.
template <ad::Scalar S>
ad::Var<S> logits_from_embeddings(ad::Tape<S>& tape, const ModelConfig& cfg, const std::vector<ad::Var<S>>& p,
                                  ad::Var<S> emb, std::size_t b, std::size_t len, std::mt19937_64* rng) {
  check_layout(cfg, p.size());
  emb = dropout(tape, emb, cfg.dropout, rng);
  auto h = encode(tape, cfg, p, emb, b, len);
  auto ctx = ad::take_rows(h, rows_range(b, len, 0, len - 1));
  return ad::matmul(ctx, p.back());
}

}  // namespace model_detail

/// Seeded parameter initialization. The output projection starts at zero so
/// the initial prediction is uniform.
inline ParamVector init_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t V = cfg.vocab_size, d = cfg.embed_dim;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  auto randn = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (auto& x : t.flat()) x = normal(rng);
    return t;
  };
  std::vector<std::pair<std::string, Tensor>> segs;
  segs.emplace_back("embed", randn({V, d}));
  switch (cfg.arch) {
    case Arch::EmbedSoftmax:
      break;
    case Arch::CausalAttention1L:
      segs.emplace_back("pos", randn({cfg.max_seq_len, d}));
      segs.emplace_back("wq", randn({d, d}));
      segs.emplace_back("wk", randn({d, d}));
      segs.emplace_back("wv", randn({d, d}));
      segs.emplace_back("wo", randn({d, d}));
      break;
    case Arch::RecurrentGate:
      segs.emplace_back("uz", randn({d, d}));
      segs.emplace_back("wz", randn({d, d}));
      segs.emplace_back("bz", Tensor({d}));
      segs.emplace_back("ux", randn({d, d}));
      segs.emplace_back("wh", randn({d, d}));
      segs.emplace_back("bh", Tensor({d}));
      break;
  }
  segs.emplace_back("out", Tensor({d, V}));
  return ParamVector(segs);
}

/// Soft-input forward pass on a tape. `x` is (b, len, V).
template <ad::Scalar S>
ad::Var<S> soft_logits(ad::Tape<S>& tape, const ModelConfig& cfg, const std::vector<ad::Var<S>>& p, ad::Var<S> x) {
  const auto& shape = x.shape();
  if (shape.size() != 3 || shape[2] != cfg.vocab_size) {
    throw ShapeError("soft batch shape " + shape_str(shape) + " does not match vocab " + std::to_string(cfg.vocab_size));
  }
  if (shape[1] < 2) throw ShapeError("sequences need at least two positions");
  const std::size_t b = shape[0], len = shape[1];
  auto emb = ad::matmul(ad::reshape(x, {b * len, cfg.vocab_size}), p[0]);
  return model_detail::logits_from_embeddings(tape, cfg, p, emb, b, len, nullptr);
}

template <ad::Scalar S>
ad::Var<S> hard_logits(ad::Tape<S>& tape, const ModelConfig& cfg, const std::vector<ad::Var<S>>& p,
                       const HardBatch& batch, std::mt19937_64* rng = nullptr) {
  if (batch.length < 2) throw ShapeError("sequences need at least two positions");
  for (std::size_t i = 0; i < batch.tokens.size(); ++i) {
    if (batch.mask[i] && (batch.tokens[i] < 0 || static_cast<std::size_t>(batch.tokens[i]) >= cfg.vocab_size)) {
      throw ShapeError("token id " + std::to_string(batch.tokens[i]) + " out of range for vocab " +
                       std::to_string(cfg.vocab_size));
    }
  }
  std::vector<std::int64_t> ids(batch.tokens);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!batch.mask[i]) ids[i] = -1;
  }
  auto emb = ad::gather_rows(p[0], std::move(ids));
  return model_detail::logits_from_embeddings(tape, cfg, p, emb, batch.batch, batch.length, rng);
}

/// Mean soft cross-entropy H(x[i+1], softmax(logits[i])) over unmasked positions.
template <ad::Scalar S>
ad::Var<S> soft_nll_var(ad::Tape<S>& tape, const ModelConfig& cfg, const std::vector<ad::Var<S>>& p, ad::Var<S> x,
                        const std::vector<std::uint8_t>& mask = {}) {
  const std::size_t b = x.shape()[0], len = x.shape()[1];
  auto logp = ad::log_softmax_rows(soft_logits(tape, cfg, p, x));
  auto flat = ad::reshape(x, {b * len, cfg.vocab_size});
  auto target = ad::take_rows(flat, model_detail::rows_range(b, len, 1, len));
  return ad::soft_cross_entropy(logp, target, model_detail::target_weights(mask, b, len));
}

template <ad::Scalar S>
ad::Var<S> hard_nll_var(ad::Tape<S>& tape, const ModelConfig& cfg, const std::vector<ad::Var<S>>& p,
                        const HardBatch& batch, std::mt19937_64* rng = nullptr) {
  auto logp = ad::log_softmax_rows(hard_logits(tape, cfg, p, batch, rng));
  std::vector<std::int64_t> targets;
  for (std::size_t s = 0; s < batch.batch; ++s) {
    for (std::size_t i = 1; i < batch.length; ++i) {
      const std::size_t k = s * batch.length + i;
      targets.push_back(batch.mask[k] ? batch.tokens[k] : -1);
    }
  }
  auto weights = model_detail::target_weights(batch.mask, batch.batch, batch.length);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0) weights[i] = 0.0;
  }
  return ad::nll(logp, std::move(targets), std::move(weights));
}

// ----------------------------------------------------------------------------
// Loss functors usable with value_and_grad / second_order
// ----------------------------------------------------------------------------

/// Soft next-token loss on the data leaf (the synthetic batch).
struct SoftNllLoss {
  ModelConfig config;
  std::vector<std::uint8_t> mask;

  template <ad::Scalar S>
  ad::Var<S> operator()(ad::Tape<S>& tape, const std::vector<ad::Var<S>>& p, ad::Var<S> x) const {
    return soft_nll_var(tape, config, p, x, mask);
  }
};

/// Hard next-token loss on a captured batch; the data leaf is unused.
struct HardNllLoss {
  ModelConfig config;
  const HardBatch* batch = nullptr;
  std::uint64_t dropout_seed = 0;
  bool train = false;

  template <ad::Scalar S>
  ad::Var<S> operator()(ad::Tape<S>& tape, const std::vector<ad::Var<S>>& p, ad::Var<S>) const {
    if (train && config.dropout > 0.0) {
      std::mt19937_64 rng(dropout_seed);
      return hard_nll_var(tape, config, p, *batch, &rng);
    }
    return hard_nll_var(tape, config, p, *batch, nullptr);
  }
};

// ----------------------------------------------------------------------------
// Plain evaluation helpers
// ----------------------------------------------------------------------------

namespace model_detail {
inline std::vector<ad::Var<double>> leaves(ad::Tape<double>& tape, const ParamVector& params) {
  std::vector<ad::Var<double>> vars;
  for (std::size_t s = 0; s < params.num_segments(); ++s) vars.push_back(tape.constant(params.segment_tensor(s)));
  return vars;
}
}  // namespace model_detail

/// Logits (b, len−1, V) for a soft batch.
inline Tensor soft_forward(const ModelConfig& cfg, const ParamVector& params, const SoftBatch& batch) {
  ad::Tape<double> tape;
  auto p = model_detail::leaves(tape, params);
  auto out = soft_logits(tape, cfg, p, tape.constant(batch.probs));
  return out.value().reshaped({batch.batch(), batch.length() - 1, cfg.vocab_size});
}

inline Tensor hard_forward(const ModelConfig& cfg, const ParamVector& params, const HardBatch& batch) {
  ad::Tape<double> tape;
  auto p = model_detail::leaves(tape, params);
  auto out = hard_logits(tape, cfg, p, batch);
  return out.value().reshaped({batch.batch, batch.length - 1, cfg.vocab_size});
}

inline double soft_nll(const ModelConfig& cfg, const ParamVector& params, const SoftBatch& batch) {
  ad::Tape<double> tape;
  auto p = model_detail::leaves(tape, params);
  return soft_nll_var(tape, cfg, p, tape.constant(batch.probs), batch.mask).value()[0];
}

inline double hard_nll(const ModelConfig& cfg, const ParamVector& params, const HardBatch& batch) {
  ad::Tape<double> tape;
  auto p = model_detail::leaves(tape, params);
  return hard_nll_var(tape, cfg, p, batch).value()[0];
}

}  // namespace farzi
