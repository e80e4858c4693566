// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "great/gradcheck.hpp"
#include "great/ops.hpp"
#include "great/random.hpp"
#include "oracle.hpp"

namespace great {
namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v, bool grad = false) {
  return Tensor({r, c}, std::move(v), grad);
}

TEST(Tensor, RejectsInconsistentShape) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({0, 2}, {}), ShapeError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor a = mat(2, 2, {1, 2, 3, 4});
  const Tensor c = matmul(a, Tensor::eye(2));
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, MatchesDenseOracle) {
  const auto expected = oracle::matmul({{1, 2}, {3, 4}}, {{5, 6}, {7, 8}});
  ASSERT_EQ(expected, (oracle::Matrix{{19, 22}, {43, 50}}));
  const Tensor c = matmul(mat(2, 2, {1, 2, 3, 4}), mat(2, 2, {5, 6, 7, 8}));
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(c[0], 19);
  EXPECT_EQ(c[1], 22);
  EXPECT_EQ(c[2], 43);
  EXPECT_EQ(c[3], 50);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    (void)matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
  }
}

TEST(LayerNorm, ConstantInputNormalizesToZero) {
  const Tensor y = layer_norm(Tensor({3}, {5, 5, 5}), Tensor::full({3}, 1.0), Tensor::zeros({3}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, HandComputedExample) {
  // mean 2, population variance 2/3 -> (x - 2) / sqrt(2/3)
  const double s = std::sqrt(1.5);
  const Tensor y = layer_norm(Tensor({3}, {1, 2, 3}), Tensor::full({3}, 1.0), Tensor::zeros({3}), 1e-12);
  EXPECT_NEAR(y[0], -s, 1e-9);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
  EXPECT_NEAR(y[2], s, 1e-9);
  EXPECT_NEAR(s, 1.2247, 1e-4);
}

TEST(LayerNorm, ZeroScaleReturnsShift) {
  Rng rng(3);
  const Tensor y = layer_norm(rng.uniform_tensor({3}, -4, 4), Tensor::zeros({3}), Tensor::full({3}, 7.0));
  for (double v : y.data()) EXPECT_EQ(v, 7.0);
}

TEST(LayerNorm, RejectsMismatchedAffine) {
  EXPECT_THROW(layer_norm(Tensor::zeros({2, 3}), Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST(LayerNorm, StatisticsProperty) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor x = rng.uniform_tensor({6, 16}, -3, 3);
    const Tensor y = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}));
    for (std::size_t r = 0; r < 6; ++r) {
      double mu = 0.0, var = 0.0;
      for (std::size_t j = 0; j < 16; ++j) mu += y[r * 16 + j];
      mu /= 16;
      for (std::size_t j = 0; j < 16; ++j) var += (y[r * 16 + j] - mu) * (y[r * 16 + j] - mu);
      var /= 16;
      EXPECT_LT(std::abs(mu), 1e-9);
      EXPECT_LT(std::abs(var - 1.0), 1e-6);
    }
  }
}

TEST(Softmax, Examples) {
  const Tensor a = softmax(Tensor({2}, {0, 0}), 0);
  EXPECT_EQ(a[0], 0.5);
  EXPECT_EQ(a[1], 0.5);
  const Tensor b = softmax(Tensor({2}, {1000, 1000}), 0);
  EXPECT_EQ(b[0], 0.5);
  EXPECT_EQ(b[1], 0.5);
  const Tensor c = softmax(Tensor({2}, {0, std::log(3.0)}), 0);
  const auto expected = oracle::softmax({0, std::log(3.0)});
  EXPECT_NEAR(c[0], expected[0], 1e-15);
  EXPECT_NEAR(c[0], 0.25, 1e-12);
  EXPECT_NEAR(c[1], 0.75, 1e-12);
}

TEST(Softmax, RejectsBadAxis) { EXPECT_THROW(softmax(Tensor::zeros({2, 2}), 2), ShapeError); }

TEST(Softmax, SumsToOneAndIsShiftInvariant) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor x = rng.uniform_tensor({3, 5, 4}, -5, 5);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const Tensor y = softmax(x, axis);
      // Shift every slice along `axis` by the same constant.
      std::vector<double> shifted(x.data().begin(), x.data().end());
      for (double& v : shifted) v += 17.25;
      const Tensor ys = softmax(Tensor(x.shape(), shifted), axis);
      for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ys[i], 1e-12);
      const std::size_t n = x.dim(axis);
      std::size_t inner = 1;
      for (std::size_t k = axis + 1; k < 3; ++k) inner *= x.dim(k);
      for (std::size_t o = 0; o < x.size() / (n * inner); ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += y[o * n * inner + j * inner + in];
          EXPECT_NEAR(s, 1.0, 1e-12);
        }
      }
    }
  }
}

TEST(Backward, SumOfSquares) {
  const Tensor x({2}, {1, 2}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, MatmulRuleIsOnesTimesBTransposed) {
  Rng rng(11);
  const Tensor a = rng.uniform_tensor({3, 4}, -1, 1, true);
  const Tensor b = rng.uniform_tensor({4, 2}, -1, 1);
  backward(sum(matmul(a, b)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(a.grad()[i * 4 + k], b[k * 2] + b[k * 2 + 1], 1e-15);
}

TEST(Backward, RejectsNonScalarAndOffTape) {
  const Tensor x({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), ShapeError);
  EXPECT_THROW(backward(Tensor::scalar(1.0)), std::logic_error);
  EXPECT_THROW(backward(Tensor::scalar(1.0, true)), std::logic_error);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  const Tensor x({1}, {3}, true);
  const Tensor y = mul(x, x);
  backward(sum(add(y, y)));  // d/dx 2x^2 = 4x
  EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(Backward, NoGradGuardSuppressesTape) {
  const Tensor x({2}, {1, 2}, true);
  NoGradGuard guard;
  EXPECT_FALSE(sum(x).on_tape());
}

TEST(FiniteDiff, Examples) {
  const auto sq = [](const Tensor& t) { return t[0] * t[0] + t[1] * t[1]; };
  const Tensor g = finite_diff_grad(sq, Tensor({2}, {1, 2}), 1e-5);
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
  Rng rng(5);
  const Tensor x = rng.uniform_tensor({4}, -1, 1);
  const Tensor ones = finite_diff_grad([](const Tensor& t) { return sum(t).item(); }, x);
  for (double v : ones.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDiff, ReportsNonFiniteIndex) {
  const auto f = [](const Tensor& t) { return t[1] > 0.5 ? std::log(-1.0) : 0.0; };
  try {
    (void)finite_diff_grad(f, Tensor({2}, {0.0, 0.5}));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos);
  }
}

TEST(FiniteDiff, AgreesWithBackwardOnMatmulChain) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor a = rng.uniform_tensor({3, 3}, -1, 1, true);
    const Tensor b = rng.uniform_tensor({3, 3}, -1, 1);
    const Tensor c = rng.uniform_tensor({3, 3}, -1, 1);
    auto f = [&](const Tensor& x) { return sum(mul(matmul(matmul(x, b), c), matmul(x, c))); };
    backward(f(a));
    const Tensor numeric = finite_diff_grad([&](const Tensor& x) { return f(x).item(); }, a.detach());
    EXPECT_LT(max_relative_error(a.grad_tensor(), numeric), 1e-6) << "seed " << seed;
  }
}

// Gradient check of each differentiable op over random inputs in [-1, 1].
struct OpCase {
  const char* name;
  Shape shape;
  std::function<Tensor(const Tensor&, Rng&)> apply;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const OpCase& op = GetParam();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 100);
    const Tensor x = rng.uniform_tensor(op.shape, -1, 1, true);
    const std::uint64_t aux_seed = seed * 7919 + 1;
    auto loss = [&](const Tensor& in) {
      Rng aux(aux_seed);
      const Tensor out = op.apply(in, aux);
      Rng wr(aux_seed + 1);
      return sum(mul(out, wr.uniform_tensor(out.shape(), -1, 1)));
    };
    backward(loss(x));
    const Tensor numeric = finite_diff_grad([&](const Tensor& in) { return loss(in).item(); }, x.detach());
    EXPECT_LT(max_relative_error(x.grad_tensor(), numeric), 1e-4) << op.name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradient,
    ::testing::Values(
        OpCase{"matmul_left", {3, 4}, [](const Tensor& x, Rng& r) { return matmul(x, r.uniform_tensor({4, 2}, -1, 1)); }},
        OpCase{"matmul_right", {4, 2}, [](const Tensor& x, Rng& r) { return matmul(r.uniform_tensor({3, 4}, -1, 1), x); }},
        OpCase{"add", {2, 3}, [](const Tensor& x, Rng& r) { return add(x, r.uniform_tensor({2, 3}, -1, 1)); }},
        OpCase{"sub", {2, 3}, [](const Tensor& x, Rng& r) { return sub(r.uniform_tensor({2, 3}, -1, 1), x); }},
        OpCase{"mul", {2, 3}, [](const Tensor& x, Rng& r) { return mul(x, r.uniform_tensor({2, 3}, -1, 1)); }},
        OpCase{"scale", {5}, [](const Tensor& x, Rng&) { return scale(x, -2.5); }},
        OpCase{"transpose", {2, 3}, [](const Tensor& x, Rng&) { return transpose(x); }},
        OpCase{"reshape", {2, 6}, [](const Tensor& x, Rng&) { return reshape(x, {3, 4}); }},
        OpCase{"mean", {3, 3}, [](const Tensor& x, Rng&) { return mean(x); }},
        OpCase{"gelu", {4, 4}, [](const Tensor& x, Rng&) { return gelu(x); }},
        OpCase{"relu", {4, 4}, [](const Tensor& x, Rng&) { return relu(x); }},
        OpCase{"softmax_axis0", {4, 3}, [](const Tensor& x, Rng&) { return softmax(x, 0); }},
        OpCase{"softmax_axis1", {4, 3}, [](const Tensor& x, Rng&) { return softmax(x, 1); }},
        OpCase{"layer_norm_x", {3, 5},
               [](const Tensor& x, Rng& r) {
                 return layer_norm(x, r.uniform_tensor({5}, -1, 1), r.uniform_tensor({5}, -1, 1));
               }},
        OpCase{"layer_norm_gamma", {5},
               [](const Tensor& g, Rng& r) {
                 return layer_norm(r.uniform_tensor({3, 5}, -1, 1), g, r.uniform_tensor({5}, -1, 1));
               }},
        OpCase{"layer_norm_beta", {5},
               [](const Tensor& b, Rng& r) {
                 return layer_norm(r.uniform_tensor({3, 5}, -1, 1), r.uniform_tensor({5}, -1, 1), b);
               }},
        OpCase{"cross_entropy", {6, 3},
               [](const Tensor& x, Rng&) {
                 const std::vector<int> t{0, 2, 1, 1, 0, 2};
                 return cross_entropy(x, t);
               }},
        OpCase{"gather_rows", {4, 2},
               [](const Tensor& x, Rng&) {
                 const std::vector<std::size_t> idx{3, 0, 0, 2};
                 return gather_rows(x, idx);
               }},
        OpCase{"slice_concat", {3, 4},
               [](const Tensor& x, Rng&) { return concat_cols({slice_cols(x, 2, 4), slice_cols(x, 0, 1)}); }},
        OpCase{"concat_rows", {2, 3},
               [](const Tensor& x, Rng& r) { return concat_rows({r.uniform_tensor({1, 3}, -1, 1), x, x}); }}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });

TEST(Purity, SameInputsGiveBitIdenticalOutputs) {
  Rng r1(42), r2(42);
  const Tensor a = r1.uniform_tensor({4, 6}, -1, 1), b = r2.uniform_tensor({4, 6}, -1, 1);
  const Tensor g = Tensor::full({6}, 1.0), z = Tensor::zeros({6});
  const Tensor ya = softmax(gelu(layer_norm(a, g, z)), 1);
  const Tensor yb = softmax(gelu(layer_norm(b, g, z)), 1);
  for (std::size_t i = 0; i < ya.size(); ++i) EXPECT_EQ(ya[i], yb[i]);
}

TEST(CrossEntropy, RejectsOutOfRangeTarget) {
  const std::vector<int> t{3};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), t), ConfigError);
}

TEST(ShiftedExp, MatchesStdExpWithinTwoUlp) {
  Rng rng(17);
  std::vector<double> v(1003);
  for (double& x : v) x = rng.uniform(-740.0, 5.0);
  v[0] = 0.0;
  v[1] = -800.0;
  v[2] = -std::numeric_limits<double>::infinity();
  std::vector<double> got = v;
  const double total = detail::exp_shifted_inplace(got.data(), got.size(), 3.0);
  double expect_total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double want = std::exp(v[i] - 3.0);
    expect_total += got[i];
    if (want == 0.0) {
      EXPECT_EQ(got[i], 0.0) << v[i];
    } else if (std::isnormal(want)) {
      EXPECT_LE(std::abs(got[i] - want), 2.0 * (std::nextafter(want, HUGE_VAL) - want)) << v[i];
    } else {
      EXPECT_NEAR(got[i], want, 1e-320) << v[i];
    }
  }
  EXPECT_EQ(total, expect_total);
}

TEST(Gemm, AllLayoutsMatchOracleAcrossTileEdges) {
  Rng rng(23);
  auto rand_matrix = [&](std::size_t r, std::size_t c) {
    oracle::Matrix x(r, std::vector<double>(c));
    for (auto& row : x)
      for (double& v : row) v = rng.uniform(-1.0, 1.0);
    return x;
  };
  auto flat = [](const oracle::Matrix& x) {
    std::vector<double> out;
    for (const auto& row : x) out.insert(out.end(), row.begin(), row.end());
    return out;
  };
  auto transpose = [](const oracle::Matrix& x) {
    oracle::Matrix t(x.front().size(), std::vector<double>(x.size()));
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < x[i].size(); ++j) t[j][i] = x[i][j];
    return t;
  };
  const std::size_t dims[][3] = {{1, 1, 1}, {3, 5, 7}, {8, 16, 16}, {13, 37, 29}, {20, 3, 41}, {33, 1100, 24}, {64, 40, 130}};
  for (const auto& d : dims) {
    const std::size_t m = d[0], k = d[1], n = d[2];
    const oracle::Matrix a = rand_matrix(m, k), b = rand_matrix(k, n), c0 = rand_matrix(m, n);
    oracle::Matrix want = oracle::matmul(a, b);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) want[i][j] += c0[i][j];
    const std::vector<double> expect = flat(want);
    const double tol = 1e-13 * static_cast<double>(k + 1);

    std::vector<double> nn = flat(c0);
    detail::gemm_nn(flat(a).data(), flat(b).data(), nn.data(), m, k, n);
    std::vector<double> nt = flat(c0);
    detail::gemm_nt(flat(a).data(), flat(transpose(b)).data(), nt.data(), m, n, k);
    std::vector<double> tn = flat(c0);
    detail::gemm_tn(flat(transpose(a)).data(), flat(b).data(), tn.data(), k, m, n);
    for (std::size_t i = 0; i < expect.size(); ++i) {
      ASSERT_NEAR(nn[i], expect[i], tol) << m << "x" << k << "x" << n;
      ASSERT_NEAR(nt[i], expect[i], tol) << m << "x" << k << "x" << n;
      ASSERT_NEAR(tn[i], expect[i], tol) << m << "x" << k << "x" << n;
    }
  }
}

}  // namespace
}  // namespace great
