// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "great/attention.hpp"
#include "great/encoder.hpp"
#include "great/gradcheck.hpp"
#include "great/gradcheck_runner.hpp"
#include "oracle.hpp"

namespace great {
namespace {

MhaWeights single_head(Tensor q, Tensor k, Tensor v, Tensor o) {
  MhaWeights w;
  w.query = {std::move(q)};
  w.key = {std::move(k)};
  w.value = {std::move(v)};
  w.output = std::move(o);
  return w;
}

TEST(Mha, SingleTokenIsValueThenOutputMap) {
  Rng rng(0);
  const MhaWeights w = MhaWeights::init(4, 1, rng);
  const TokenGrid x{rng.uniform_tensor({1, 1, 4}, -1, 1), 1, 1, 1};
  const Tensor got = mha_forward(x, w).tokens;
  const Tensor expected = matmul(matmul(reshape(x.tokens, {1, 4}), w.value[0]), w.output);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(got[i], expected[i], 1e-15);
}

TEST(Mha, ZeroQueriesAverageValues) {
  Rng rng(1);
  const std::size_t c = 3, t = 5;
  const TokenGrid x{rng.uniform_tensor({t, 1, c}, -1, 1), 1, t, 1};
  const MhaWeights w = single_head(Tensor::zeros({c, c}), rng.uniform_tensor({c, c}, -1, 1), Tensor::eye(c),
                                   Tensor::eye(c));
  const Tensor got = mha_forward(x, w).tokens;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    for (std::size_t k = 0; k < t; ++k) mean += x.tokens[k * c + ch] / static_cast<double>(t);
    for (std::size_t k = 0; k < t; ++k) EXPECT_NEAR(got[k * c + ch], mean, 1e-14);
  }
}

TEST(Mha, TwoTokenHandOracle) {
  // Two heads of width 1. Head 0 sees Q = [1,2], K = [1,0], V = [10,20]; head 1 is silenced by the output map.
  const TokenGrid x{Tensor({2, 1, 2}, {1, 0, 0, 1}), 1, 2, 1};
  MhaWeights w;
  w.query = {Tensor({2, 1}, {1, 2}), Tensor::zeros({2, 1})};
  w.key = {Tensor({2, 1}, {1, 0}), Tensor::zeros({2, 1})};
  w.value = {Tensor({2, 1}, {10, 20}), Tensor::zeros({2, 1})};
  w.output = Tensor({2, 2}, {1, 0, 0, 0});
  const Tensor got = mha_forward(x, w).tokens;

  const std::vector<double> q{1, 2}, k{1, 0}, v{10, 20};
  for (std::size_t i = 0; i < 2; ++i) {
    const auto p = oracle::softmax({q[i] * k[0], q[i] * k[1]});  // 1/sqrt(d_h) = 1
    EXPECT_NEAR(got[i * 2], p[0] * v[0] + p[1] * v[1], 1e-13);
    EXPECT_EQ(got[i * 2 + 1], 0.0);
  }
  EXPECT_NEAR(got[0], 10.0 * std::exp(1.0) / (std::exp(1.0) + 1) + 20.0 / (std::exp(1.0) + 1), 1e-13);
}

TEST(Mha, AttentionRowsSumToOne) {
  // A constant-one channel mapped through the value projection exposes each row sum.
  Rng rng(2);
  const std::size_t c = 4, t = 12;
  Tensor x = rng.uniform_tensor({t, 1, c}, -3, 3);
  std::vector<double> d(x.data().begin(), x.data().end());
  for (std::size_t k = 0; k < t; ++k) d[k * c] = 1.0;
  std::vector<double> v(c * c, 0.0);
  v[0] = 1.0;
  const MhaWeights w =
      single_head(rng.uniform_tensor({c, c}, -2, 2), rng.uniform_tensor({c, c}, -2, 2), Tensor({c, c}, v), Tensor::eye(c));
  const Tensor got = mha_forward(TokenGrid{Tensor({t, 1, c}, d), 1, t, 1}, w).tokens;
  for (std::size_t k = 0; k < t; ++k) EXPECT_NEAR(got[k * c], 1.0, 1e-12);
}

TEST(Mha, TokenPermutationEquivariance) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const std::size_t t = 9, c = 4;
    const MhaWeights w = MhaWeights::init(c, 2, rng);
    const Tensor x = rng.uniform_tensor({t, 1, c}, -1, 1);
    std::vector<std::size_t> perm(t);
    for (std::size_t i = 0; i < t; ++i) perm[i] = i;
    rng.shuffle(perm);
    std::vector<double> xp(x.size());
    for (std::size_t k = 0; k < t; ++k) std::copy_n(x.data().begin() + perm[k] * c, c, xp.begin() + k * c);
    const Tensor out = mha_forward(TokenGrid{x, 1, t, 1}, w).tokens;
    const Tensor outp = mha_forward(TokenGrid{Tensor(x.shape(), xp), 1, t, 1}, w).tokens;
    for (std::size_t k = 0; k < t; ++k)
      for (std::size_t ch = 0; ch < c; ++ch) EXPECT_NEAR(outp[k * c + ch], out[perm[k] * c + ch], 1e-13);
  }
}

TEST(ScaledDotAttention, MatchesComposedOps) {
  Rng rng(6);
  const Tensor q = rng.uniform_tensor({7, 3}, -1, 1), k = rng.uniform_tensor({5, 3}, -1, 1);
  const Tensor v = rng.uniform_tensor({5, 2}, -1, 1);
  const Tensor fused = scaled_dot_attention(q, k, v, 0.5);
  const Tensor composed = matmul(softmax(scale(matmul(q, transpose(k)), 0.5), 1), v);
  ASSERT_EQ(fused.shape(), (Shape{7, 2}));
  for (std::size_t i = 0; i < fused.size(); ++i) EXPECT_NEAR(fused[i], composed[i], 1e-14);
}

TEST(ScaledDotAttention, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor q = rng.uniform_tensor({6, 3}, -1, 1), k = rng.uniform_tensor({4, 3}, -1, 1);
    const Tensor v = rng.uniform_tensor({4, 2}, -1, 1), r = rng.uniform_tensor({6, 2}, -1, 1);
    const Tensor args[3] = {q, k, v};
    for (std::size_t which = 0; which < 3; ++which) {
      auto f = [&](const Tensor& x) {
        Tensor a[3] = {args[0], args[1], args[2]};
        a[which] = x;
        return sum(mul(scaled_dot_attention(a[0], a[1], a[2], 0.7), r));
      };
      const Tensor x = args[which].detach(true);
      backward(f(x));
      const Tensor fd = finite_diff_grad([&](const Tensor& t) { return f(t).item(); }, args[which]);
      EXPECT_LT(max_relative_error(x.grad_tensor(), fd), 1e-4) << "input " << which << " seed " << seed;
    }
  }
}

TEST(ScaledDotAttention, RejectsMismatchedShapes) {
  EXPECT_THROW(scaled_dot_attention(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), Tensor::zeros({2, 1}), 1.0),
               ShapeError);
}

TEST(Mha, ShapePreserved) {
  Rng rng(3);
  const TokenGrid x{rng.uniform_tensor({16, 16, 8}, -1, 1), 16, 16, 4};
  EXPECT_EQ(mha_forward(x, MhaWeights::init(8, 2, rng)).tokens.shape(), x.tokens.shape());
}

TEST(Mha, RejectsIndivisibleHeads) {
  Rng rng(4);
  EXPECT_THROW(MhaWeights::init(6, 4, rng), ConfigError);
}

TEST(Mha, StateIsScoreMatrix) {
  EXPECT_EQ(attention_state_size(1), 1u);
  EXPECT_EQ(attention_state_size(1024), 1'048'576u);
  EXPECT_EQ(attention_state_size(1024) / (16 * 16), 4096u);
  Rng rng(5);
  InteractionProbe probe;
  {
    ScopedProbe scope(probe);
    (void)mha_forward(TokenGrid{rng.uniform_tensor({4, 4, 4}, -1, 1), 4, 4, 2}, MhaWeights::init(4, 2, rng));
  }
  EXPECT_EQ(probe.peak_entries, 256u);
  EXPECT_EQ(probe.allocations, 2u);
}

TEST(Mha, GradientsMatchFiniteDifferences) {
  ModelConfig cfg;
  cfg.height = cfg.width = 8;
  cfg.patch = 4;
  cfg.channels = 4;
  for (std::size_t heads : {1, 2}) {
    cfg.heads = heads;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      for (const auto& g : gradcheck_mha(cfg, seed, {}).groups) EXPECT_LT(g.max_rel_error, 1e-4) << g.group;
    }
  }
}

}  // namespace
}  // namespace great
