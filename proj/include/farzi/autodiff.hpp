#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Tape records one evaluation of a loss. Every op is written once, generic
// in its scalar type: running the tape over `double` yields gradients, and
// running it over `Dual` (value + tangent) differentiates the reverse pass
// itself in forward mode, which is how Hessian-vector products are formed
// without materializing a Hessian.

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "farzi/errors.hpp"
#include "farzi/tensor.hpp"

namespace farzi::ad {

// ----------------------------------------------------------------------------
// Dual numbers
// ----------------------------------------------------------------------------

struct Dual {
  double val = 0.0;
  double tan = 0.0;

  constexpr Dual() = default;
  constexpr Dual(double v) : val(v) {}  // NOLINT: implicit lift of constants
  constexpr Dual(double v, double t) : val(v), tan(t) {}

  Dual& operator+=(const Dual& o) {
    val += o.val;
    tan += o.tan;
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    val -= o.val;
    tan -= o.tan;
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    tan = tan * o.val + val * o.tan;
    val *= o.val;
    return *this;
  }
  Dual& operator/=(const Dual& o) {
    const double inv = 1.0 / o.val;
    tan = (tan - val * inv * o.tan) * inv;
    val *= inv;
    return *this;
  }
  bool operator==(const Dual&) const = default;
};

inline Dual operator+(Dual a, const Dual& b) { return a += b; }
inline Dual operator-(Dual a, const Dual& b) { return a -= b; }
inline Dual operator*(Dual a, const Dual& b) { return a *= b; }
inline Dual operator/(Dual a, const Dual& b) { return a /= b; }
inline Dual operator-(const Dual& a) { return {-a.val, -a.tan}; }

inline Dual exp(const Dual& a) {
  const double e = std::exp(a.val);
  return {e, e * a.tan};
}
inline Dual log(const Dual& a) { return {std::log(a.val), a.tan / a.val}; }
inline Dual sqrt(const Dual& a) {
  const double s = std::sqrt(a.val);
  return {s, a.tan / (2.0 * s)};
}
inline Dual tanh(const Dual& a) {
  const double t = std::tanh(a.val);
  return {t, (1.0 - t * t) * a.tan};
}

inline double primal(double x) { return x; }
inline double primal(const Dual& x) { return x.val; }
inline double tangent(const Dual& x) { return x.tan; }

template <class S>
concept Scalar = std::same_as<S, double> || std::same_as<S, Dual>;

// ----------------------------------------------------------------------------
// Tape
// ----------------------------------------------------------------------------

template <Scalar S>
class Tape;

/// Handle to a tape node.
template <Scalar S>
struct Var {
  Tape<S>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<S>& value() const { return tape->value(*this); }
  const Shape& shape() const { return tape->value(*this).shape(); }
};

template <Scalar S>
class Tape {
 public:
  using T = BasicTensor<S>;
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> leaf(T value, bool requires_grad) { return push(std::move(value), requires_grad, nullptr); }
  Var<S> constant(T value) { return push(std::move(value), false, nullptr); }

  Var<S> push(T value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), T{}, requires_grad ? std::move(backward) : Backward{}, requires_grad});
    return Var<S>{this, nodes_.size() - 1};
  }

  const T& value(Var<S> v) const { return nodes_.at(v.id).value; }
  const T& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var<S> v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of node `id`, allocated as zeros on first use.
  T& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = T(n.value.shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return nodes_[id].grad.size() == nodes_[id].value.size(); }

  /// Gradient of the last `backward` root with respect to `v`; zeros if `v`
  /// does not influence the root.
  T gradient(Var<S> v) {
    if (!has_grad(v.id)) return T(value(v).shape());
    return nodes_[v.id].grad;
  }

  void backward(Var<S> root) {
    if (value(root).size() != 1) throw ShapeError("backward requires a scalar root");
    if (!requires_grad(root)) return;
    grad(root.id)[0] = S(1.0);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && has_grad(i)) n.backward(*this, i);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    T value;
    T grad;
    Backward backward;
    bool requires_grad;
  };
  std::vector<Node> nodes_;
};

namespace detail {

template <Scalar S>
bool any_grad(std::initializer_list<Var<S>> vars) {
  for (const auto& v : vars) {
    if (v.tape->requires_grad(v)) return true;
  }
  return false;
}

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

inline void require_matrix(const Shape& s, const char* op) {
  require(s.size() == 2, std::string(op) + ": expected a matrix, got " + shape_str(s));
}

}  // namespace detail

// ----------------------------------------------------------------------------
// Linear algebra
// ----------------------------------------------------------------------------

/// C = A·B for A (n,k), B (k,m).
template <Scalar S>
Var<S> matmul(Var<S> a, Var<S> b) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require_matrix(A.shape(), "matmul");
  detail::require_matrix(B.shape(), "matmul");
  const std::size_t n = A.dim(0), k = A.dim(1), m = B.dim(1);
  detail::require(B.dim(0) == k, "matmul: inner extents differ " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  BasicTensor<S> C({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    S* c = C.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const S aip = A[i * k + p];
      const S* brow = B.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) c[j] += aip * brow[j];
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return tape.push(std::move(C), detail::any_grad({a, b}), [ia, ib, n, k, m](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    const auto& A = t.value(ia);
    const auto& B = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& GA = t.grad(ia);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          S acc{};
          for (std::size_t j = 0; j < m; ++j) acc += G[i * m + j] * B[p * m + j];
          GA[i * k + p] += acc;
        }
      }
    }
    if (t.requires_grad(ib)) {
      auto& GB = t.grad(ib);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const S aip = A[i * k + p];
          for (std::size_t j = 0; j < m; ++j) GB[p * m + j] += aip * G[i * m + j];
        }
      }
    }
  });
}

/// C = A·Bᵀ for A (n,k), B (m,k).
template <Scalar S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require_matrix(A.shape(), "matmul_nt");
  detail::require_matrix(B.shape(), "matmul_nt");
  const std::size_t n = A.dim(0), k = A.dim(1), m = B.dim(0);
  detail::require(B.dim(1) == k, "matmul_nt: inner extents differ");
  BasicTensor<S> C({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      S acc{};
      for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
      C[i * m + j] = acc;
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return tape.push(std::move(C), detail::any_grad({a, b}), [ia, ib, n, k, m](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    const auto& A = t.value(ia);
    const auto& B = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& GA = t.grad(ia);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          const S g = G[i * m + j];
          for (std::size_t p = 0; p < k; ++p) GA[i * k + p] += g * B[j * k + p];
        }
      }
    }
    if (t.requires_grad(ib)) {
      auto& GB = t.grad(ib);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          const S g = G[i * m + j];
          for (std::size_t p = 0; p < k; ++p) GB[j * k + p] += g * A[i * k + p];
        }
      }
    }
  });
}

// ----------------------------------------------------------------------------
// Elementwise
// ----------------------------------------------------------------------------

template <Scalar S>
Var<S> add(Var<S> a, Var<S> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require(A.shape() == B.shape(), "add: shapes differ " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  BasicTensor<S> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] + B[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(C), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    for (std::size_t id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto& GX = t.grad(id);
      for (std::size_t i = 0; i < G.size(); ++i) GX[i] += G[i];
    }
  });
}

template <Scalar S>
Var<S> sub(Var<S> a, Var<S> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require(A.shape() == B.shape(), "sub: shapes differ");
  BasicTensor<S> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] - B[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(C), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    if (t.requires_grad(ia)) {
      auto& GA = t.grad(ia);
      for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i];
    }
    if (t.requires_grad(ib)) {
      auto& GB = t.grad(ib);
      for (std::size_t i = 0; i < G.size(); ++i) GB[i] -= G[i];
    }
  });
}

template <Scalar S>
Var<S> mul(Var<S> a, Var<S> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require(A.shape() == B.shape(), "mul: shapes differ");
  BasicTensor<S> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * B[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(C), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    const auto& A = t.value(ia);
    const auto& B = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& GA = t.grad(ia);
      for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i] * B[i];
    }
    if (t.requires_grad(ib)) {
      auto& GB = t.grad(ib);
      for (std::size_t i = 0; i < G.size(); ++i) GB[i] += G[i] * A[i];
    }
  });
}

/// scale·a + shift, with constant scale and shift.
template <Scalar S>
Var<S> affine(Var<S> a, double scale, double shift = 0.0) {
  const auto& A = a.value();
  BasicTensor<S> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = S(scale) * A[i] + S(shift);
  const std::size_t ia = a.id;
  return a.tape->push(std::move(C), detail::any_grad({a}), [ia, scale](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    auto& GA = t.grad(ia);
    for (std::size_t i = 0; i < G.size(); ++i) GA[i] += S(scale) * G[i];
  });
}

/// a (n,m) + bias (m) broadcast over rows.
template <Scalar S>
Var<S> add_bias(Var<S> a, Var<S> bias) {
  const auto& A = a.value();
  const auto& b = bias.value();
  detail::require_matrix(A.shape(), "add_bias");
  const std::size_t n = A.dim(0), m = A.dim(1);
  detail::require(b.size() == m, "add_bias: bias length mismatch");
  BasicTensor<S> C(A.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) C[i * m + j] = A[i * m + j] + b[j];
  }
  const std::size_t ia = a.id, ib = bias.id;
  return a.tape->push(std::move(C), detail::any_grad({a, bias}), [ia, ib, n, m](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    if (t.requires_grad(ia)) {
      auto& GA = t.grad(ia);
      for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i];
    }
    if (t.requires_grad(ib)) {
      auto& GB = t.grad(ib);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) GB[j] += G[i * m + j];
      }
    }
  });
}

template <Scalar S>
Var<S> tanh(Var<S> a) {
  using std::tanh;
  const auto& A = a.value();
  BasicTensor<S> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = tanh(A[i]);
  const std::size_t ia = a.id;
  return a.tape->push(std::move(C), detail::any_grad({a}), [ia](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    const auto& Y = t.value(self);
    auto& GA = t.grad(ia);
    for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i] * (S(1.0) - Y[i] * Y[i]);
  });
}

template <Scalar S>
Var<S> sigmoid(Var<S> a) {
  using std::exp;
  const auto& A = a.value();
  BasicTensor<S> C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = S(1.0) / (S(1.0) + exp(-A[i]));
  const std::size_t ia = a.id;
  return a.tape->push(std::move(C), detail::any_grad({a}), [ia](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    const auto& Y = t.value(self);
    auto& GA = t.grad(ia);
    for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i] * Y[i] * (S(1.0) - Y[i]);
  });
}

// ----------------------------------------------------------------------------
// Row-wise normalizations
// ----------------------------------------------------------------------------

/// Per-row standardization without affine parameters.
template <Scalar S>
Var<S> layer_norm_rows(Var<S> a, double eps = 1e-5) {
  using std::sqrt;
  const auto& A = a.value();
  detail::require_matrix(A.shape(), "layer_norm_rows");
  const std::size_t n = A.dim(0), m = A.dim(1);
  BasicTensor<S> Y(A.shape());
  BasicTensor<S> inv_std({n});
  for (std::size_t i = 0; i < n; ++i) {
    S mean{};
    for (std::size_t j = 0; j < m; ++j) mean += A[i * m + j];
    mean /= S(static_cast<double>(m));
    S var{};
    for (std::size_t j = 0; j < m; ++j) {
      const S c = A[i * m + j] - mean;
      var += c * c;
    }
    var /= S(static_cast<double>(m));
    inv_std[i] = S(1.0) / sqrt(var + S(eps));
    for (std::size_t j = 0; j < m; ++j) Y[i * m + j] = (A[i * m + j] - mean) * inv_std[i];
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(Y), detail::any_grad({a}),
                      [ia, n, m, inv_std = std::move(inv_std)](Tape<S>& t, std::size_t self) {
                        const auto& G = t.grad(self);
                        const auto& Y = t.value(self);
                        auto& GA = t.grad(ia);
                        const S inv_m(1.0 / static_cast<double>(m));
                        for (std::size_t i = 0; i < n; ++i) {
                          S gsum{}, gysum{};
                          for (std::size_t j = 0; j < m; ++j) {
                            gsum += G[i * m + j];
                            gysum += G[i * m + j] * Y[i * m + j];
                          }
                          for (std::size_t j = 0; j < m; ++j) {
                            GA[i * m + j] += inv_std[i] * (G[i * m + j] - inv_m * gsum - Y[i * m + j] * inv_m * gysum);
                          }
                        }
                      });
}

template <Scalar S>
Var<S> log_softmax_rows(Var<S> a) {
  using std::exp;
  using std::log;
  const auto& A = a.value();
  detail::require_matrix(A.shape(), "log_softmax_rows");
  const std::size_t n = A.dim(0), m = A.dim(1);
  BasicTensor<S> Y(A.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, primal(A[i * m + j]));
    S z{};
    for (std::size_t j = 0; j < m; ++j) z += exp(A[i * m + j] - S(mx));
    const S lse = log(z) + S(mx);
    for (std::size_t j = 0; j < m; ++j) Y[i * m + j] = A[i * m + j] - lse;
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(Y), detail::any_grad({a}), [ia, n, m](Tape<S>& t, std::size_t self) {
    using std::exp;
    const auto& G = t.grad(self);
    const auto& Y = t.value(self);
    auto& GA = t.grad(ia);
    for (std::size_t i = 0; i < n; ++i) {
      S gsum{};
      for (std::size_t j = 0; j < m; ++j) gsum += G[i * m + j];
      for (std::size_t j = 0; j < m; ++j) GA[i * m + j] += G[i * m + j] - exp(Y[i * m + j]) * gsum;
    }
  });
}

template <Scalar S>
Var<S> softmax_rows(Var<S> a) {
  using std::exp;
  const auto& A = a.value();
  detail::require_matrix(A.shape(), "softmax_rows");
  const std::size_t n = A.dim(0), m = A.dim(1);
  BasicTensor<S> Y(A.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, primal(A[i * m + j]));
    S z{};
    for (std::size_t j = 0; j < m; ++j) {
      Y[i * m + j] = exp(A[i * m + j] - S(mx));
      z += Y[i * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) Y[i * m + j] /= z;
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(Y), detail::any_grad({a}), [ia, n, m](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    const auto& Y = t.value(self);
    auto& GA = t.grad(ia);
    for (std::size_t i = 0; i < n; ++i) {
      S inner{};
      for (std::size_t j = 0; j < m; ++j) inner += G[i * m + j] * Y[i * m + j];
      for (std::size_t j = 0; j < m; ++j) GA[i * m + j] += Y[i * m + j] * (G[i * m + j] - inner);
    }
  });
}

/// Row i is softmax over columns 0..i; columns beyond i are exactly zero.
template <Scalar S>
Var<S> causal_softmax(Var<S> a) {
  using std::exp;
  const auto& A = a.value();
  detail::require_matrix(A.shape(), "causal_softmax");
  const std::size_t n = A.dim(0);
  detail::require(A.dim(1) == n, "causal_softmax: expected a square matrix");
  BasicTensor<S> Y(A.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, primal(A[i * n + j]));
    S z{};
    for (std::size_t j = 0; j <= i; ++j) {
      Y[i * n + j] = exp(A[i * n + j] - S(mx));
      z += Y[i * n + j];
    }
    for (std::size_t j = 0; j <= i; ++j) Y[i * n + j] /= z;
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(Y), detail::any_grad({a}), [ia, n](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    const auto& Y = t.value(self);
    auto& GA = t.grad(ia);
    for (std::size_t i = 0; i < n; ++i) {
      S inner{};
      for (std::size_t j = 0; j <= i; ++j) inner += G[i * n + j] * Y[i * n + j];
      for (std::size_t j = 0; j <= i; ++j) GA[i * n + j] += Y[i * n + j] * (G[i * n + j] - inner);
    }
  });
}

// ----------------------------------------------------------------------------
// Indexing and layout
// ----------------------------------------------------------------------------

/// Rows of `table` (n,d) selected by id; negative ids produce zero rows.
template <Scalar S>
Var<S> gather_rows(Var<S> table, std::vector<std::int64_t> ids) {
  const auto& E = table.value();
  detail::require_matrix(E.shape(), "gather_rows");
  const std::size_t n = E.dim(0), d = E.dim(1);
  BasicTensor<S> Y({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0) continue;
    detail::require(static_cast<std::size_t>(ids[r]) < n, "gather_rows: id " + std::to_string(ids[r]) + " out of range");
    std::copy_n(E.data() + static_cast<std::size_t>(ids[r]) * d, d, Y.data() + r * d);
  }
  const std::size_t ie = table.id;
  return table.tape->push(std::move(Y), detail::any_grad({table}),
                          [ie, d, ids = std::move(ids)](Tape<S>& t, std::size_t self) {
                            const auto& G = t.grad(self);
                            auto& GE = t.grad(ie);
                            for (std::size_t r = 0; r < ids.size(); ++r) {
                              if (ids[r] < 0) continue;
                              const std::size_t base = static_cast<std::size_t>(ids[r]) * d;
                              for (std::size_t j = 0; j < d; ++j) GE[base + j] += G[r * d + j];
                            }
                          });
}

/// Rows of a matrix in the given order (repeats allowed).
template <Scalar S>
Var<S> take_rows(Var<S> a, std::vector<std::size_t> rows) {
  const auto& A = a.value();
  detail::require_matrix(A.shape(), "take_rows");
  const std::size_t n = A.dim(0), m = A.dim(1);
  BasicTensor<S> Y({rows.size(), m});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    detail::require(rows[r] < n, "take_rows: row out of range");
    std::copy_n(A.data() + rows[r] * m, m, Y.data() + r * m);
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(Y), detail::any_grad({a}), [ia, m, rows = std::move(rows)](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    auto& GA = t.grad(ia);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t j = 0; j < m; ++j) GA[rows[r] * m + j] += G[r * m + j];
    }
  });
}

template <Scalar S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t m = parts.front().value().dim(1);
  std::size_t n = 0;
  bool needs = false;
  for (const auto& p : parts) {
    detail::require_matrix(p.shape(), "concat_rows");
    detail::require(p.value().dim(1) == m, "concat_rows: column counts differ");
    n += p.value().dim(0);
    needs = needs || p.tape->requires_grad(p);
  }
  BasicTensor<S> Y({n, m});
  std::vector<std::size_t> ids;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), Y.data() + off);
    off += p.value().size();
    ids.push_back(p.id);
  }
  return parts.front().tape->push(std::move(Y), needs, [ids = std::move(ids)](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const std::size_t len = t.value(id).size();
      if (t.requires_grad(id)) {
        auto& GX = t.grad(id);
        for (std::size_t i = 0; i < len; ++i) GX[i] += G[off + i];
      }
      off += len;
    }
  });
}

template <Scalar S>
Var<S> reshape(Var<S> a, Shape shape) {
  auto Y = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->push(std::move(Y), detail::any_grad({a}), [ia](Tape<S>& t, std::size_t self) {
    const auto& G = t.grad(self);
    auto& GA = t.grad(ia);
    for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i];
  });
}

// ----------------------------------------------------------------------------
// Reductions and losses
// ----------------------------------------------------------------------------

/// Σ a⊙b as a scalar.
template <Scalar S>
Var<S> dot(Var<S> a, Var<S> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require(A.size() == B.size(), "dot: sizes differ");
  S acc{};
  for (std::size_t i = 0; i < A.size(); ++i) acc += A[i] * B[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(BasicTensor<S>(Shape{}, acc), detail::any_grad({a, b}), [ia, ib](Tape<S>& t, std::size_t self) {
    const S g = t.grad(self)[0];
    const auto& A = t.value(ia);
    const auto& B = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& GA = t.grad(ia);
      for (std::size_t i = 0; i < A.size(); ++i) GA[i] += g * B[i];
    }
    if (t.requires_grad(ib)) {
      auto& GB = t.grad(ib);
      for (std::size_t i = 0; i < B.size(); ++i) GB[i] += g * A[i];
    }
  });
}

template <Scalar S>
Var<S> sum(Var<S> a) {
  const auto& A = a.value();
  S acc{};
  for (std::size_t i = 0; i < A.size(); ++i) acc += A[i];
  const std::size_t ia = a.id;
  return a.tape->push(BasicTensor<S>(Shape{}, acc), detail::any_grad({a}), [ia](Tape<S>& t, std::size_t self) {
    const S g = t.grad(self)[0];
    auto& GA = t.grad(ia);
    for (std::size_t i = 0; i < GA.size(); ++i) GA[i] += g;
  });
}

/// Weighted mean over rows of −Σⱼ target[i,j]·logp[i,j]. Rows with weight 0
/// are ignored; the normalizer is Σ weights.
template <Scalar S>
Var<S> soft_cross_entropy(Var<S> logp, Var<S> target, std::vector<double> weights) {
  const auto& L = logp.value();
  const auto& P = target.value();
  detail::require_matrix(L.shape(), "soft_cross_entropy");
  detail::require(L.shape() == P.shape(), "soft_cross_entropy: target shape " + shape_str(P.shape()) +
                                              " does not match " + shape_str(L.shape()));
  const std::size_t n = L.dim(0), m = L.dim(1);
  detail::require(weights.size() == n, "soft_cross_entropy: weight count mismatch");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (wsum <= 0.0) throw ShapeError("soft_cross_entropy: no unmasked positions");
  S acc{};
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    S row{};
    for (std::size_t j = 0; j < m; ++j) row += P[i * m + j] * L[i * m + j];
    acc -= S(weights[i]) * row;
  }
  acc /= S(wsum);
  const std::size_t il = logp.id, ip = target.id;
  return logp.tape->push(BasicTensor<S>(Shape{}, acc), detail::any_grad({logp, target}),
                         [il, ip, n, m, wsum, weights = std::move(weights)](Tape<S>& t, std::size_t self) {
                           const S g = t.grad(self)[0] / S(wsum);
                           const auto& L = t.value(il);
                           const auto& P = t.value(ip);
                           const bool gl = t.requires_grad(il), gp = t.requires_grad(ip);
                           for (std::size_t i = 0; i < n; ++i) {
                             if (weights[i] == 0.0) continue;
                             const S c = -S(weights[i]) * g;
                             if (gl) {
                               auto& GL = t.grad(il);
                               for (std::size_t j = 0; j < m; ++j) GL[i * m + j] += c * P[i * m + j];
                             }
                             if (gp) {
                               auto& GP = t.grad(ip);
                               for (std::size_t j = 0; j < m; ++j) GP[i * m + j] += c * L[i * m + j];
                             }
                           }
                         });
}

/// Weighted mean of −logp[i, ids[i]].
template <Scalar S>
Var<S> nll(Var<S> logp, std::vector<std::int64_t> ids, std::vector<double> weights) {
  const auto& L = logp.value();
  detail::require_matrix(L.shape(), "nll");
  const std::size_t n = L.dim(0), m = L.dim(1);
  detail::require(ids.size() == n && weights.size() == n, "nll: target count mismatch");
  double wsum = 0.0;
  S acc{};
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    detail::require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < m, "nll: target id out of range");
    wsum += weights[i];
    acc -= S(weights[i]) * L[i * m + static_cast<std::size_t>(ids[i])];
  }
  if (wsum <= 0.0) throw ShapeError("nll: no unmasked positions");
  acc /= S(wsum);
  const std::size_t il = logp.id;
  return logp.tape->push(BasicTensor<S>(Shape{}, acc), detail::any_grad({logp}),
                         [il, m, wsum, ids = std::move(ids), weights = std::move(weights)](Tape<S>& t, std::size_t self) {
                           const S g = t.grad(self)[0] / S(wsum);
                           auto& GL = t.grad(il);
                           for (std::size_t i = 0; i < ids.size(); ++i) {
                             if (weights[i] == 0.0) continue;
                             GL[i * m + static_cast<std::size_t>(ids[i])] -= S(weights[i]) * g;
                           }
                         });
}

// ----------------------------------------------------------------------------
// Differentiation entry points
// ----------------------------------------------------------------------------

/// A loss evaluable on both tapes: `loss(tape, params, data) -> scalar Var`.
/// `params` holds one leaf per ParamVector segment in layout order; `data`
/// is a leaf holding the (possibly empty) continuous batch.
template <class F>
concept DifferentiableLoss =
    requires(const F& f, Tape<double>& t1, Tape<Dual>& t2, const std::vector<Var<double>>& p1,
             const std::vector<Var<Dual>>& p2, Var<double> x1, Var<Dual> x2) {
      { f(t1, p1, x1) } -> std::same_as<Var<double>>;
      { f(t2, p2, x2) } -> std::same_as<Var<Dual>>;
    };

struct GradResult {
  double value = 0.0;
  ParamVector grad;
  Tensor data_grad;  ///< empty unless requested
};

struct SecondOrderResult {
  double value = 0.0;
  ParamVector grad;       ///< ∇_w L
  ParamVector hvp_param;  ///< (∇_w∇_w L)·v
  Tensor hvp_data;        ///< (∇_x∇_w L)ᵀ·v, shaped like the data
  Tensor data_grad;       ///< ∇_x L
};

namespace detail {

template <Scalar S>
std::vector<Var<S>> param_leaves(Tape<S>& tape, const ParamVector& params, const ParamVector* direction) {
  std::vector<Var<S>> vars;
  vars.reserve(params.num_segments());
  for (std::size_t s = 0; s < params.num_segments(); ++s) {
    const auto& seg = params.segment(s);
    auto w = params.segment_values(s);
    BasicTensor<S> t(seg.shape);
    for (std::size_t i = 0; i < seg.size; ++i) {
      if constexpr (std::same_as<S, Dual>) {
        t[i] = Dual(w[i], direction ? direction->segment_values(s)[i] : 0.0);
      } else {
        t[i] = w[i];
      }
    }
    vars.push_back(tape.leaf(std::move(t), true));
  }
  return vars;
}

inline void require_finite_loss(double value) {
  if (!std::isfinite(value)) throw NumericError("loss", "non-finite loss value");
}

inline void require_finite_data(const Tensor& t, const char* what) {
  if (!all_finite(t.flat())) throw NumericError("data", std::string(what) + ": non-finite value");
}

}  // namespace detail

/// Loss value and gradient with respect to params (and optionally data).
template <DifferentiableLoss F>
GradResult value_and_grad(const F& loss, const ParamVector& params, const Tensor& data = {},
                          bool want_data_grad = false) {
  Tape<double> tape;
  auto vars = detail::param_leaves<double>(tape, params, nullptr);
  auto x = tape.leaf(data, want_data_grad && !data.empty());
  auto out = loss(tape, vars, x);
  GradResult r;
  r.value = out.value()[0];
  detail::require_finite_loss(r.value);
  tape.backward(out);
  r.grad = ParamVector::zeros_like(params);
  for (std::size_t s = 0; s < vars.size(); ++s) {
    if (!tape.has_grad(vars[s].id)) continue;
    const auto& g = tape.grad(vars[s].id);
    std::copy(g.flat().begin(), g.flat().end(), r.grad.segment_values(s).begin());
  }
  r.grad.require_finite("gradient");
  if (want_data_grad) {
    r.data_grad = tape.gradient(x);
    detail::require_finite_data(r.data_grad, "data gradient");
  }
  return r;
}

/// One forward-over-reverse pass: gradient plus both Hessian-vector products
/// along direction `v` in parameter space. A non-empty `data_dir` also seeds
/// a tangent on the data, so `hvp_param` becomes H·v + (∂∇_w L/∂x)·data_dir.
template <DifferentiableLoss F>
SecondOrderResult second_order(const F& loss, const ParamVector& params, const Tensor& data, const ParamVector& v,
                               const Tensor& data_dir = {}) {
  params.require_conformal(v, "hvp direction");
  if (!data_dir.empty() && data_dir.size() != data.size()) throw ShapeError("data direction does not match data");
  Tape<Dual> tape;
  auto vars = detail::param_leaves<Dual>(tape, params, &v);
  BasicTensor<Dual> xd(data.shape());
  for (std::size_t i = 0; i < data.size(); ++i) xd[i] = Dual(data[i], data_dir.empty() ? 0.0 : data_dir[i]);
  auto x = tape.leaf(std::move(xd), !data.empty());
  auto out = loss(tape, vars, x);
  SecondOrderResult r;
  r.value = out.value()[0].val;
  detail::require_finite_loss(r.value);
  tape.backward(out);
  r.grad = ParamVector::zeros_like(params);
  r.hvp_param = ParamVector::zeros_like(params);
  for (std::size_t s = 0; s < vars.size(); ++s) {
    if (!tape.has_grad(vars[s].id)) continue;
    const auto& g = tape.grad(vars[s].id);
    auto gs = r.grad.segment_values(s);
    auto hs = r.hvp_param.segment_values(s);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gs[i] = g[i].val;
      hs[i] = g[i].tan;
    }
  }
  r.grad.require_finite("gradient");
  r.hvp_param.require_finite("hessian-vector product");
  r.hvp_data = Tensor(data.shape());
  r.data_grad = Tensor(data.shape());
  if (!data.empty() && tape.has_grad(x.id)) {
    const auto& g = tape.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      r.data_grad[i] = g[i].val;
      r.hvp_data[i] = g[i].tan;
    }
  }
  detail::require_finite_data(r.hvp_data, "mixed hessian-vector product");
  return r;
}

/// (∇_w∇_w L)·v
template <DifferentiableLoss F>
ParamVector hvp_param(const F& loss, const ParamVector& params, const Tensor& data, const ParamVector& v) {
  return second_order(loss, params, data, v).hvp_param;
}

/// (∇_x∇_w L)ᵀ·v, shaped like `data`.
template <DifferentiableLoss F>
Tensor hvp_data(const F& loss, const ParamVector& params, const Tensor& data, const ParamVector& v) {
  if (data.empty()) throw ConfigError("hvp_data: loss has no differentiable data");
  return second_order(loss, params, data, v).hvp_data;
}

}  // namespace farzi::ad
