#include <gtest/gtest.h>

#include <cmath>

#include "farzi/finite_diff.hpp"
#include "farzi/models.hpp"
#include "farzi/optim.hpp"
#include "test_util.hpp"

using namespace farzi;
using farzi::testing::random_hard;
using farzi::testing::random_soft;
using farzi::testing::randomize;

namespace {

ModelConfig config(Arch arch, std::uint64_t seed = 1) {
  ModelConfig c;
  c.vocab_size = 7;
  c.embed_dim = 5;
  c.arch = arch;
  c.max_seq_len = 6;
  c.seed = seed;
  return c;
}

class AllArchs : public ::testing::TestWithParam<Arch> {};

}  // namespace

TEST(Models, InitIsDeterministic) {
  for (Arch a : {Arch::EmbedSoftmax, Arch::CausalAttention1L, Arch::RecurrentGate}) {
    EXPECT_EQ(init_params(config(a, 3)), init_params(config(a, 3)));
    EXPECT_FALSE(init_params(config(a, 3)) == init_params(config(a, 4)));
  }
}

TEST(Models, EmbedSoftmaxShapes) {
  ModelConfig c;
  c.vocab_size = 16;
  c.embed_dim = 8;
  const auto p = init_params(c);
  ASSERT_EQ(p.num_segments(), 2u);
  EXPECT_EQ(p.segment(0).name, "embed");
  EXPECT_EQ(p.segment(0).shape, (Shape{16, 8}));
  EXPECT_EQ(p.segment(1).name, "out");
  EXPECT_EQ(p.segment(1).shape, (Shape{8, 16}));
}

TEST(Models, ConfigValidation) {
  ModelConfig c;
  c.vocab_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.embed_dim = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.max_seq_len = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_arch("lstm"), ConfigError);
  EXPECT_EQ(parse_arch("attention"), Arch::CausalAttention1L);
}

TEST_P(AllArchs, ZeroOutputGivesLogV) {
  const auto c = config(GetParam());
  const auto p = init_params(c);
  const auto hb = random_hard(3, 5, c.vocab_size, 11);
  EXPECT_NEAR(hard_nll(c, p, hb), std::log(7.0), 1e-12);
  const SoftBatch sb{random_soft(3, 5, c.vocab_size, 12), {}};
  EXPECT_NEAR(soft_nll(c, p, sb), std::log(7.0), 1e-12);
  const auto logits = soft_forward(c, p, sb);
  for (double x : logits.flat()) EXPECT_EQ(x, 0.0);
}

TEST_P(AllArchs, OneHotMatchesHard) {
  const auto c = config(GetParam());
  const auto p = randomize(init_params(c), 5);
  auto hb = random_hard(3, 5, c.vocab_size, 13);
  hb.mask[4] = 0;  // trailing pad in the first row
  hb.tokens[4] = -1;
  const auto sb = one_hot(hb, c.vocab_size);
  const auto a = soft_forward(c, p, sb);
  const auto b = hard_forward(c, p, hb);
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  EXPECT_NEAR(soft_nll(c, p, sb), hard_nll(c, p, hb), 1e-12);
}

TEST_P(AllArchs, Causality) {
  const auto c = config(GetParam());
  const auto p = randomize(init_params(c), 6);
  SoftBatch sb{random_soft(2, 5, c.vocab_size, 14), {}};
  const auto base = soft_forward(c, p, sb);
  const std::size_t V = c.vocab_size;
  for (std::size_t pos = 0; pos < 5; ++pos) {
    SoftBatch moved = sb;
    for (std::size_t s = 0; s < 2; ++s) {
      for (std::size_t j = 0; j < V; ++j) moved.probs[(s * 5 + pos) * V + j] = j == 0 ? 1.0 : 0.0;
    }
    const auto out = soft_forward(c, p, moved);
    for (std::size_t s = 0; s < 2; ++s) {
      for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < V; ++j) {
          const std::size_t k = (s * 4 + i) * V + j;
          if (i < pos) {
            EXPECT_EQ(out[k], base[k]) << "position " << i << " saw input " << pos;
          }
        }
      }
    }
  }
}

TEST_P(AllArchs, CausalityViaMixedHessian) {
  // A loss reading only the logits at position i has a data gradient, and
  // every mixed second derivative, equal to zero beyond i + 1 (the target).
  const auto c = config(GetParam());
  const auto p = randomize(init_params(c), 7);
  const auto x = random_soft(2, 5, c.vocab_size, 15);
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<std::uint8_t> mask(10, 0);
    for (std::size_t s = 0; s < 2; ++s) mask[s * 5 + i] = mask[s * 5 + i + 1] = 1;
    const SoftNllLoss loss{c, mask};
    const auto v = randomize(p, 100 + i);
    const auto hd = ad::hvp_data(loss, p, x, v);
    for (std::size_t s = 0; s < 2; ++s) {
      for (std::size_t j = i + 2; j < 5; ++j) {
        for (std::size_t t = 0; t < c.vocab_size; ++t) EXPECT_EQ(hd[(s * 5 + j) * c.vocab_size + t], 0.0);
      }
    }
  }
}

TEST_P(AllArchs, SoftNllGradientWrtProbsMatchesFiniteDifferences) {
  const auto c = config(GetParam());
  const auto p = randomize(init_params(c), 8);
  const auto x = random_soft(2, 4, c.vocab_size, 16);
  const SoftNllLoss loss{c, {}};
  const auto g = ad::value_and_grad(loss, p, x, true).data_grad;
  const auto ref = fd::tensor_gradient(
      [&](const Tensor& probe) { return soft_nll(c, p, SoftBatch{probe, {}}); }, x, 1e-5);
  EXPECT_LT(fd::relative_error(g.flat(), ref.flat()), 1e-6);
}

TEST_P(AllArchs, ParamGradientMatchesFiniteDifferences) {
  const auto c = config(GetParam());
  const auto p = randomize(init_params(c), 9);
  const auto hb = random_hard(3, 5, c.vocab_size, 17);
  const auto g = ad::value_and_grad(HardNllLoss{c, &hb}, p).grad;
  const auto ref = fd::param_gradient([&](const ParamVector& w) { return hard_nll(c, w, hb); }, p, 1e-5);
  EXPECT_LT(fd::relative_error(g.flat(), ref.flat()), 1e-6);
}

TEST_P(AllArchs, LossInvariantToBatchOrder) {
  const auto c = config(GetParam());
  const auto p = randomize(init_params(c), 10);
  const auto hb = random_hard(3, 5, c.vocab_size, 18);
  HardBatch rev = hb;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t i = 0; i < 5; ++i) rev.tokens[s * 5 + i] = hb.tokens[(2 - s) * 5 + i];
  }
  EXPECT_NEAR(hard_nll(c, p, hb), hard_nll(c, p, rev), 1e-12);
}

TEST_P(AllArchs, OverfitsFourSequences) {
  auto c = config(GetParam());
  c.vocab_size = 6;
  c.embed_dim = 8;
  HardBatch hb;
  hb.batch = 4;
  hb.length = 6;
  // deterministic successor: every token has one next token
  const std::int64_t next[6] = {1, 2, 3, 4, 5, 0};
  for (std::int64_t s = 0; s < 4; ++s) {
    std::int64_t t = s;
    for (int i = 0; i < 6; ++i) {
      hb.tokens.push_back(t);
      hb.mask.push_back(1);
      t = next[t];
    }
  }
  const HardNllLoss loss{c, &hb};
  AdamHyper h;
  h.lr = 0.05;
  const auto r = adam_unroll(init_params(c), loss, Tensor{}, 600, h, CheckpointPolicy{0}, BatchSchedule::full(0));
  EXPECT_LE(hard_nll(c, r.final.w, hb), 0.01);
}

TEST(Models, RejectsMismatchedShapes) {
  const auto c = config(Arch::EmbedSoftmax);
  const auto p = init_params(c);
  EXPECT_THROW(soft_nll(c, p, SoftBatch{random_soft(2, 4, 5, 1), {}}), ShapeError);
  auto hb = random_hard(2, 4, c.vocab_size, 2);
  hb.tokens[0] = 7;
  EXPECT_THROW(hard_nll(c, p, hb), ShapeError);
  EXPECT_THROW(hard_nll(config(Arch::RecurrentGate), p, random_hard(2, 4, 7, 3)), ShapeError);
}

TEST(Models, DropoutOnlyWhenTraining) {
  auto c = config(Arch::CausalAttention1L);
  c.dropout = 0.5;
  const auto p = randomize(init_params(c), 4);
  const auto hb = random_hard(3, 5, c.vocab_size, 19);
  const double eval = ad::value_and_grad(HardNllLoss{c, &hb, 1, false}, p).value;
  EXPECT_DOUBLE_EQ(eval, hard_nll(c, p, hb));
  const double train1 = ad::value_and_grad(HardNllLoss{c, &hb, 1, true}, p).value;
  const double train1b = ad::value_and_grad(HardNllLoss{c, &hb, 1, true}, p).value;
  EXPECT_EQ(train1, train1b);
  EXPECT_NE(train1, eval);
}

INSTANTIATE_TEST_SUITE_P(Arch, AllArchs,
                         ::testing::Values(Arch::EmbedSoftmax, Arch::CausalAttention1L, Arch::RecurrentGate),
                         [](const auto& info) { return to_string(info.param); });
