#pragma once

// Latent-factorized synthetic data: rows are softmax(D̃[i, j]·M / τ).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "farzi/binio.hpp"
#include "farzi/errors.hpp"
#include "farzi/models.hpp"
#include "farzi/tensor.hpp"

namespace farzi {

struct SyntheticDataset {
  Tensor latent;   ///< D̃, (μ, ξ, d)
  Tensor decoder;  ///< M, (d, V)
  double tau = 1.0;

  std::size_t mu() const { return latent.dim(0); }
  std::size_t xi() const { return latent.dim(1); }
  std::size_t dim() const { return latent.dim(2); }
  std::size_t vocab() const { return decoder.dim(1); }

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("temperature must be positive");
    if (latent.rank() != 3 || decoder.rank() != 2) throw ShapeError("synthetic dataset has malformed tensors");
    if (decoder.dim(0) != dim()) {
      throw ShapeError("decoder " + shape_str(decoder.shape()) + " does not match latent " + shape_str(latent.shape()));
    }
  }

  /// (D̃, M) as one parameter vector for the outer optimizer.
  ParamVector params() const { return ParamVector({{"latent", latent}, {"decoder", decoder}}); }
  void set_params(const ParamVector& p) {
    latent = p.segment_tensor("latent");
    decoder = p.segment_tensor("decoder");
  }

  bool operator==(const SyntheticDataset&) const = default;
};

struct SyntheticShape {
  std::size_t mu = 8;
  std::size_t xi = 8;
  std::size_t dim = 4;
  std::size_t vocab = 16;
  double tau = 1.0;
};

/// D̃ ~ N(0, 1). M is the transposed teacher embedding (V, d) when one is
/// given with a matching width, else N(0, 1/√d).
inline SyntheticDataset init_synthetic(const SyntheticShape& s, std::uint64_t seed,
                                       const Tensor* teacher_embedding = nullptr) {
  if (s.mu < 1 || s.xi < 2 || s.dim < 1 || s.vocab < 2) throw ConfigError("synthetic shape needs mu>=1, xi>=2, d>=1, V>=2");
  if (!(s.tau > 0.0)) throw ConfigError("temperature must be positive");
  if (s.dim >= std::min(s.mu * s.xi, s.vocab)) {
    std::clog << "warning: latent dim " << s.dim << " is not below min(mu*xi, V) = " << std::min(s.mu * s.xi, s.vocab)
              << "; the factorization is not low-rank\n";
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SyntheticDataset syn{Tensor({s.mu, s.xi, s.dim}), Tensor({s.dim, s.vocab}), s.tau};
  for (auto& x : syn.latent.flat()) x = normal(rng);
  const bool use_teacher = teacher_embedding && teacher_embedding->rank() == 2 &&
                           teacher_embedding->dim(0) == s.vocab && teacher_embedding->dim(1) == s.dim;
  if (teacher_embedding && !use_teacher) {
    std::clog << "warning: teacher embedding " << shape_str(teacher_embedding->shape())
              << " does not fit the decoder; using a random decoder\n";
  }
  if (use_teacher) {
    for (std::size_t v = 0; v < s.vocab; ++v) {
      for (std::size_t k = 0; k < s.dim; ++k) syn.decoder.at(k, v) = teacher_embedding->at(v, k);
    }
  } else {
    std::normal_distribution<double> dec(0.0, 1.0 / std::sqrt(static_cast<double>(s.dim)));
    for (auto& x : syn.decoder.flat()) x = dec(rng);
  }
  return syn;
}

namespace synthetic_detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;
}  // namespace synthetic_detail

/// Pre-temperature logits D̃·M as a (μ·ξ, V) matrix.
inline Tensor logit_matrix(const SyntheticDataset& syn) {
  using namespace synthetic_detail;
  syn.validate();
  const std::size_t n = syn.mu() * syn.xi();
  Tensor z({n, syn.vocab()});
  Map(z.data(), n, syn.vocab()) =
      ConstMap(syn.latent.data(), n, syn.dim()) * ConstMap(syn.decoder.data(), syn.dim(), syn.vocab());
  return z;
}

/// All rows materialized, (μ, ξ, V).
inline Tensor materialize_all(const SyntheticDataset& syn) {
  Tensor z = logit_matrix(syn);
  const std::size_t V = syn.vocab();
  for (std::size_t r = 0; r < z.dim(0); ++r) {
    double* row = z.data() + r * V;
    double mx = row[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      row[j] = std::exp((row[j] - mx) / syn.tau);
      sum += row[j];
    }
    for (std::size_t j = 0; j < V; ++j) row[j] /= sum;
  }
  return z.reshaped({syn.mu(), syn.xi(), V});
}

/// Selected sequences as a soft batch.
inline SoftBatch materialize(const SyntheticDataset& syn, const std::vector<std::size_t>& rows) {
  for (auto r : rows) {
    if (r >= syn.mu()) throw ConfigError("synthetic row " + std::to_string(r) + " out of range");
  }
  const Tensor all = materialize_all(syn);
  const std::size_t stride = syn.xi() * syn.vocab();
  SoftBatch sb{Tensor({rows.size(), syn.xi(), syn.vocab()}), {}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(all.data() + rows[i] * stride, stride, sb.probs.data() + i * stride);
  }
  return sb;
}

struct SyntheticGrad {
  Tensor latent;
  Tensor decoder;
};

/// Pulls a gradient on the materialized rows back to (D̃, M). `probs` must be
/// materialize_all(syn).
inline SyntheticGrad materialize_backward(const SyntheticDataset& syn, const Tensor& probs, const Tensor& dprobs) {
  using namespace synthetic_detail;
  const std::size_t n = syn.mu() * syn.xi(), V = syn.vocab(), d = syn.dim();
  if (probs.size() != n * V || dprobs.size() != n * V) throw ShapeError("materialize_backward: gradient shape mismatch");
  Tensor dz({n, V});
  for (std::size_t r = 0; r < n; ++r) {
    const double* p = probs.data() + r * V;
    const double* g = dprobs.data() + r * V;
    double inner = 0.0;
    for (std::size_t j = 0; j < V; ++j) inner += p[j] * g[j];
    for (std::size_t j = 0; j < V; ++j) dz[r * V + j] = p[j] * (g[j] - inner) / syn.tau;
  }
  SyntheticGrad out{Tensor(syn.latent.shape()), Tensor(syn.decoder.shape())};
  const ConstMap DZ(dz.data(), n, V);
  Map(out.latent.data(), n, d) = DZ * ConstMap(syn.decoder.data(), d, V).transpose();
  Map(out.decoder.data(), d, V) = ConstMap(syn.latent.data(), n, d).transpose() * DZ;
  return out;
}

/// Singular values of D̃·M in descending order.
inline std::vector<double> logit_singular_values(const SyntheticDataset& syn) {
  using namespace synthetic_detail;
  const Tensor z = logit_matrix(syn);
  Eigen::BDCSVD<RowMat> svd(ConstMap(z.data(), z.dim(0), z.dim(1)));
  const auto& s = svd.singularValues();
  return {s.data(), s.data() + s.size()};
}

/// Number of singular values above rel_tol times the largest.
inline std::size_t numerical_rank(const SyntheticDataset& syn, double rel_tol = 1e-8) {
  const auto s = logit_singular_values(syn);
  if (s.empty() || s.front() == 0.0) return 0;
  return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [&](double x) { return x > rel_tol * s.front(); }));
}

// ----------------------------------------------------------------------------
// File format: "FARZISYN", u32 version, u64 μ ξ d V, f64 τ, D̃, M
// ----------------------------------------------------------------------------

inline constexpr std::uint32_t kSyntheticFormatVersion = 1;

inline void save_synthetic(const SyntheticDataset& syn, const std::string& path) {
  syn.validate();
  binio::Writer w(path);
  w.bytes("FARZISYN");
  w.u32(kSyntheticFormatVersion);
  w.u64(syn.mu());
  w.u64(syn.xi());
  w.u64(syn.dim());
  w.u64(syn.vocab());
  w.f64(syn.tau);
  w.f64s(syn.latent.flat());
  w.f64s(syn.decoder.flat());
  w.close();
}

inline SyntheticDataset load_synthetic(const std::string& path) {
  binio::Reader r(path);
  r.expect_magic("FARZISYN");
  const std::size_t at = r.offset();
  if (const auto v = r.u32("version"); v != kSyntheticFormatVersion) {
    throw FormatError("unsupported synthetic-data version " + std::to_string(v), at);
  }
  const std::size_t mu = r.u64("header"), xi = r.u64("header"), d = r.u64("header"), V = r.u64("header");
  const double tau = r.f64("header");
  if (mu == 0 || xi == 0 || d == 0 || V == 0 || mu * xi * d + d * V > r.remaining() / sizeof(double)) {
    throw FormatError("header extents inconsistent with file size", r.offset());
  }
  SyntheticDataset syn{Tensor({mu, xi, d}), Tensor({d, V}), tau};
  r.f64s(syn.latent.flat(), "latent");
  r.f64s(syn.decoder.flat(), "decoder");
  r.expect_end();
  syn.validate();
  return syn;
}

}  // namespace farzi
