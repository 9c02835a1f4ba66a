#include <gtest/gtest.h>

#include <functional>

#include "farzi/autodiff.hpp"
#include "farzi/finite_diff.hpp"
#include "test_util.hpp"

using namespace farzi;
using farzi::testing::random_tensor;

namespace {

struct HalfSquaredNorm {
  template <class S>
  ad::Var<S> operator()(ad::Tape<S>&, const std::vector<ad::Var<S>>& p, ad::Var<S>) const {
    return ad::affine(ad::dot(p[0], p[0]), 0.5);
  }
};

struct ConstantLoss {
  template <class S>
  ad::Var<S> operator()(ad::Tape<S>& tape, const std::vector<ad::Var<S>>& p, ad::Var<S>) const {
    auto zero = ad::affine(ad::dot(p[0], p[0]), 0.0, 3.25);
    return ad::add(zero, tape.constant(BasicTensor<S>(Shape{}, S(0.0))));
  }
};

/// 0.5·wᵀAw with w (3,1).
struct Quadratic {
  Tensor A;
  template <class S>
  ad::Var<S> operator()(ad::Tape<S>& tape, const std::vector<ad::Var<S>>& p, ad::Var<S>) const {
    BasicTensor<S> a(A.shape());
    for (std::size_t i = 0; i < A.size(); ++i) a[i] = S(A[i]);
    return ad::affine(ad::dot(p[0], ad::matmul(tape.constant(std::move(a)), p[0])), 0.5);
  }
};

/// wᵀ·B·x with w (n,1) a parameter and x (m,1) the data.
struct Bilinear {
  Tensor B;
  template <class S>
  ad::Var<S> operator()(ad::Tape<S>& tape, const std::vector<ad::Var<S>>& p, ad::Var<S> x) const {
    BasicTensor<S> b(B.shape());
    for (std::size_t i = 0; i < B.size(); ++i) b[i] = S(B[i]);
    return ad::dot(p[0], ad::matmul(tape.constant(std::move(b)), x));
  }
};

/// Two-layer network on a soft batch x (n,k): mean soft-CE of
/// log_softmax(tanh(x·W1 + b1)·W2) against the rows of x itself.
struct TwoLayer {
  template <class S>
  ad::Var<S> operator()(ad::Tape<S>&, const std::vector<ad::Var<S>>& p, ad::Var<S> x) const {
    auto h = ad::tanh(ad::add_bias(ad::matmul(x, p[0]), p[1]));
    auto logp = ad::log_softmax_rows(ad::matmul(h, p[2]));
    return ad::soft_cross_entropy(logp, x, std::vector<double>(x.shape()[0], 1.0));
  }
};

ParamVector two_layer_params(std::uint64_t seed) {
  return ParamVector({{"w1", random_tensor({5, 4}, seed)},
                      {"b1", random_tensor({4}, seed + 1)},
                      {"w2", random_tensor({4, 5}, seed + 2)}});
}

template <class F>
double loss_at(const F& f, const ParamVector& w, const Tensor& x) {
  return ad::value_and_grad(f, w, x).value;
}

/// Wraps a unary tensor op into a loss dot(op(p0), R) for gradient checks.
struct UnaryProbe {
  std::function<ad::Var<double>(ad::Var<double>)> op_d;
  std::function<ad::Var<ad::Dual>(ad::Var<ad::Dual>)> op_dual;
  Tensor R;

  template <class S>
  ad::Var<S> operator()(ad::Tape<S>& tape, const std::vector<ad::Var<S>>& p, ad::Var<S>) const {
    ad::Var<S> y;
    if constexpr (std::is_same_v<S, double>) {
      y = op_d(p[0]);
    } else {
      y = op_dual(p[0]);
    }
    BasicTensor<S> r(y.shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = S(R[i % R.size()]);
    return ad::dot(y, tape.constant(std::move(r)));
  }
};

/// Finite loss whose gradient in segment "bad" is infinite.
struct InfSlope {
  template <class S>
  ad::Var<S> operator()(ad::Tape<S>& tape, const std::vector<ad::Var<S>>& p, ad::Var<S>) const {
    BasicTensor<S> r(p[1].shape(), S(1e308));
    return ad::add(ad::dot(p[0], p[0]), ad::affine(ad::dot(p[1], tape.constant(std::move(r))), 10.0));
  }
};

}  // namespace

TEST(ValueAndGrad, QuadraticGradientIsW) {
  ParamVector w({{"w", Tensor({2}, {3.0, 4.0})}});
  auto r = ad::value_and_grad(HalfSquaredNorm{}, w);
  EXPECT_DOUBLE_EQ(r.value, 12.5);
  EXPECT_DOUBLE_EQ(r.grad.flat()[0], 3.0);
  EXPECT_DOUBLE_EQ(r.grad.flat()[1], 4.0);
}

TEST(ValueAndGrad, ConstantLossHasZeroGradient) {
  ParamVector w({{"w", random_tensor({4}, 1)}});
  auto r = ad::value_and_grad(ConstantLoss{}, w);
  EXPECT_DOUBLE_EQ(r.value, 3.25);
  for (double g : r.grad.flat()) EXPECT_EQ(g, 0.0);
}

TEST(ValueAndGrad, TwoLayerMatchesFiniteDifferences) {
  const auto w = two_layer_params(7);
  const auto x = farzi::testing::random_soft(1, 6, 5, 3).reshaped({6, 5});
  auto r = ad::value_and_grad(TwoLayer{}, w, x, true);
  auto ref = fd::param_gradient([&](const ParamVector& p) { return loss_at(TwoLayer{}, p, x); }, w, 1e-5);
  EXPECT_LT(fd::relative_error(r.grad.flat(), ref.flat()), 1e-6);
  auto xref = fd::tensor_gradient([&](const Tensor& xx) { return loss_at(TwoLayer{}, w, xx); }, x, 1e-5);
  EXPECT_LT(fd::relative_error(r.data_grad.flat(), xref.flat()), 1e-6);
}

TEST(ValueAndGrad, NonFiniteLossNamesTheFailure) {
  ParamVector w({{"w", Tensor({2}, {1e200, 1e200})}});
  EXPECT_THROW(ad::value_and_grad(HalfSquaredNorm{}, w), NumericError);
}

TEST(ValueAndGrad, NonFiniteGradientNamesSegment) {
  ParamVector w({{"ok", Tensor({1}, {1.0})}, {"bad", Tensor({1}, {0.0})}});
  try {
    ad::value_and_grad(InfSlope{}, w);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.where(), "bad");
  }
}

// Every primitive's backward agrees with central differences.
TEST(Primitives, GradientsMatchFiniteDifferences) {
  using VD = ad::Var<double>;
  using VX = ad::Var<ad::Dual>;
  const Tensor R = random_tensor({64}, 99);
  const Tensor other = random_tensor({4, 4}, 5);
  auto c_d = [other](VD a) { return a.tape->constant(other); };
  auto c_x = [other](VX a) {
    BasicTensor<ad::Dual> t(other.shape());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = other[i];
    return a.tape->constant(std::move(t));
  };
  struct Case {
    const char* name;
    std::function<VD(VD)> d;
    std::function<VX(VX)> x;
  };
  std::vector<Case> cases = {
      {"matmul", [&](VD a) { return ad::matmul(a, c_d(a)); }, [&](VX a) { return ad::matmul(a, c_x(a)); }},
      {"matmul_rhs", [&](VD a) { return ad::matmul(c_d(a), a); }, [&](VX a) { return ad::matmul(c_x(a), a); }},
      {"matmul_nt", [&](VD a) { return ad::matmul_nt(a, a); }, [&](VX a) { return ad::matmul_nt(a, a); }},
      {"mul", [&](VD a) { return ad::mul(a, a); }, [&](VX a) { return ad::mul(a, a); }},
      {"sub", [&](VD a) { return ad::sub(ad::tanh(a), a); }, [&](VX a) { return ad::sub(ad::tanh(a), a); }},
      {"sigmoid", [](VD a) { return ad::sigmoid(a); }, [](VX a) { return ad::sigmoid(a); }},
      {"layer_norm", [](VD a) { return ad::layer_norm_rows(a); }, [](VX a) { return ad::layer_norm_rows(a); }},
      {"log_softmax", [](VD a) { return ad::log_softmax_rows(a); }, [](VX a) { return ad::log_softmax_rows(a); }},
      {"softmax", [](VD a) { return ad::softmax_rows(a); }, [](VX a) { return ad::softmax_rows(a); }},
      {"causal_softmax", [](VD a) { return ad::causal_softmax(a); }, [](VX a) { return ad::causal_softmax(a); }},
      {"take_rows", [](VD a) { return ad::take_rows(a, {3, 0, 0, 2}); },
       [](VX a) { return ad::take_rows(a, {3, 0, 0, 2}); }},
      {"gather_rows", [](VD a) { return ad::gather_rows(a, {1, -1, 1, 3}); },
       [](VX a) { return ad::gather_rows(a, {1, -1, 1, 3}); }},
      {"concat_rows", [](VD a) { return ad::concat_rows<double>({a, ad::tanh(a)}); },
       [](VX a) { return ad::concat_rows<ad::Dual>({a, ad::tanh(a)}); }},
      {"add_bias", [](VD a) { return ad::add_bias(a, ad::take_rows(a, {1}).tape->constant(Tensor({4}, {1, 2, 3, 4}))); },
       [](VX a) { return ad::add_bias(a, a.tape->constant(BasicTensor<ad::Dual>({4}, {1.0, 2.0, 3.0, 4.0}))); }},
      {"nll", [](VD a) { return ad::nll(ad::log_softmax_rows(a), {0, 3, 1, 2}, {1, 0.5, 0, 2}); },
       [](VX a) { return ad::nll(ad::log_softmax_rows(a), {0, 3, 1, 2}, {1, 0.5, 0, 2}); }},
      {"soft_ce", [](VD a) { return ad::soft_cross_entropy(ad::log_softmax_rows(a), ad::softmax_rows(a), {1, 1, 0, 1}); },
       [](VX a) { return ad::soft_cross_entropy(ad::log_softmax_rows(a), ad::softmax_rows(a), {1, 1, 0, 1}); }},
      {"sum_reshape", [](VD a) { return ad::sum(ad::reshape(ad::mul(a, a), {16})); },
       [](VX a) { return ad::sum(ad::reshape(ad::mul(a, a), {16})); }},
  };
  const ParamVector w({{"a", random_tensor({4, 4}, 17)}});
  for (const auto& c : cases) {
    UnaryProbe probe{c.d, c.x, R};
    auto r = ad::value_and_grad(probe, w);
    auto ref = fd::param_gradient([&](const ParamVector& p) { return loss_at(probe, p, Tensor{}); }, w, 1e-5);
    EXPECT_LT(fd::relative_error(r.grad.flat(), ref.flat()), 1e-6) << c.name;
    // forward-over-reverse sees the same gradient as the plain pass
    auto so = ad::second_order(probe, w, Tensor{}, farzi::testing::randomize(w, 4));
    EXPECT_LT(fd::relative_error(so.grad.flat(), r.grad.flat()), 1e-13) << c.name;
  }
}

TEST(HvpParam, QuadraticHessianColumn) {
  Tensor A({3, 3}, {2.0, 0.5, -1.0, 0.5, 3.0, 0.25, -1.0, 0.25, 4.0});
  ParamVector w({{"w", random_tensor({3, 1}, 2)}});
  ParamVector e1({{"w", Tensor({3, 1}, {1.0, 0.0, 0.0})}});
  auto hv = ad::hvp_param(Quadratic{A}, w, Tensor{}, e1);
  EXPECT_DOUBLE_EQ(hv.flat()[0], 2.0);
  EXPECT_DOUBLE_EQ(hv.flat()[1], 0.5);
  EXPECT_DOUBLE_EQ(hv.flat()[2], -1.0);
}

TEST(HvpParam, ZeroDirectionGivesZero) {
  const auto w = two_layer_params(3);
  const auto x = farzi::testing::random_soft(1, 4, 5, 8).reshaped({4, 5});
  auto hv = ad::hvp_param(TwoLayer{}, w, x, ParamVector::zeros_like(w));
  for (double h : hv.flat()) EXPECT_EQ(h, 0.0);
}

TEST(HvpParam, MatchesDirectionalDifferenceOfGradient) {
  const auto w = two_layer_params(11);
  const auto x = farzi::testing::random_soft(1, 6, 5, 12).reshaped({6, 5});
  const auto v = farzi::testing::randomize(w, 13, 1.0);
  auto hv = ad::hvp_param(TwoLayer{}, w, x, v);
  const double h = 1e-4;
  ParamVector up = w, down = w;
  for (std::size_t i = 0; i < w.total_len(); ++i) {
    up.flat()[i] += h * v.flat()[i];
    down.flat()[i] -= h * v.flat()[i];
  }
  auto gu = ad::value_and_grad(TwoLayer{}, up, x).grad;
  auto gd = ad::value_and_grad(TwoLayer{}, down, x).grad;
  Tensor ref({w.total_len()});
  for (std::size_t i = 0; i < ref.size(); ++i) ref[i] = (gu.flat()[i] - gd.flat()[i]) / (2 * h);
  EXPECT_LT(fd::relative_error(hv.flat(), ref.flat()), 1e-5);
}

TEST(HvpParam, HessianIsSymmetric) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto w = two_layer_params(20 + seed);
    const auto x = farzi::testing::random_soft(1, 5, 5, 30 + seed).reshaped({5, 5});
    const auto u = farzi::testing::randomize(w, 40 + seed, 1.0);
    const auto v = farzi::testing::randomize(w, 50 + seed, 1.0);
    const double vhu = dot(v.flat(), ad::hvp_param(TwoLayer{}, w, x, u).flat());
    const double uhv = dot(u.flat(), ad::hvp_param(TwoLayer{}, w, x, v).flat());
    EXPECT_NEAR(vhu, uhv, 1e-8);
  }
}

TEST(HvpParam, ShapeMismatchThrows) {
  const auto w = two_layer_params(1);
  ParamVector v({{"w1", Tensor({5, 4})}});
  EXPECT_THROW(ad::hvp_param(TwoLayer{}, w, Tensor{}, v), ShapeError);
}

TEST(HvpData, BilinearMixedHessianIsBTranspose) {
  const Tensor B = random_tensor({3, 4}, 6);
  ParamVector w({{"w", random_tensor({3, 1}, 7)}});
  const Tensor x = random_tensor({4, 1}, 8);
  const auto v = farzi::testing::randomize(w, 9, 1.0);
  auto hx = ad::hvp_data(Bilinear{B}, w, x, v);
  ASSERT_EQ(hx.shape(), x.shape());
  for (std::size_t j = 0; j < 4; ++j) {
    double ref = 0.0;
    for (std::size_t i = 0; i < 3; ++i) ref += B.at(i, j) * v.flat()[i];
    EXPECT_NEAR(hx[j], ref, 1e-14);
  }
}

TEST(HvpData, ZeroDirectionGivesZero) {
  const auto w = two_layer_params(2);
  const auto x = farzi::testing::random_soft(1, 4, 5, 3).reshaped({4, 5});
  auto hx = ad::hvp_data(TwoLayer{}, w, x, ParamVector::zeros_like(w));
  for (double h : hx.flat()) EXPECT_EQ(h, 0.0);
}

TEST(HvpData, MatchesFiniteDifferenceUnderDataPerturbation) {
  const auto w = two_layer_params(31);
  const auto x = farzi::testing::random_soft(1, 5, 5, 32).reshaped({5, 5});
  const auto v = farzi::testing::randomize(w, 33, 1.0);
  auto hx = ad::hvp_data(TwoLayer{}, w, x, v);
  auto ref = fd::tensor_gradient(
      [&](const Tensor& xx) { return dot(v.flat(), ad::value_and_grad(TwoLayer{}, w, xx).grad.flat()); }, x, 1e-5);
  EXPECT_LT(fd::relative_error(hx.flat(), ref.flat()), 1e-5);
}

TEST(HvpData, RequiresDifferentiableData) {
  const auto w = two_layer_params(2);
  EXPECT_THROW(ad::hvp_data(TwoLayer{}, w, Tensor{}, w), ConfigError);
}

TEST(ParamVector, FlattenUnflattenIsBitExact) {
  ParamVector p({{"a", random_tensor({3, 2}, 1)}, {"b", random_tensor({5}, 2)}});
  auto q = ParamVector::unflatten(p, p.flatten());
  EXPECT_EQ(p, q);
  EXPECT_EQ(q.segment_tensor("a"), p.segment_tensor("a"));
  EXPECT_EQ(p.total_len(), 11u);
}

TEST(ParamVector, DuplicateNamesRejected) {
  EXPECT_THROW(ParamVector({{"a", Tensor({1})}, {"a", Tensor({2})}}), ConfigError);
}

TEST(Determinism, RepeatedEvaluationIsBitIdentical) {
  const auto w = two_layer_params(5);
  const auto x = farzi::testing::random_soft(1, 6, 5, 6).reshaped({6, 5});
  const auto v = farzi::testing::randomize(w, 7);
  auto a = ad::second_order(TwoLayer{}, w, x, v);
  auto b = ad::second_order(TwoLayer{}, w, x, v);
  EXPECT_EQ(a.grad, b.grad);
  EXPECT_EQ(a.hvp_param, b.hvp_param);
  EXPECT_EQ(a.hvp_data, b.hvp_data);
}

TEST(MemoryTracker, CountsTensorPayloads) {
  const auto before = MemoryTracker::current();
  {
    PeakMemoryScope scope;
    Tensor t({1000});
    EXPECT_EQ(MemoryTracker::current() - before, 1000 * sizeof(double));
    EXPECT_GE(scope.peak_bytes(), 1000 * sizeof(double));
  }
  EXPECT_EQ(MemoryTracker::current(), before);
}
