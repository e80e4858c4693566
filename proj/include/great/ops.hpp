// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <bit>
#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "great/tensor.hpp"

namespace great {

namespace detail {

inline std::vector<double>* grad_target(const ImplPtr& input) {
  return input->requires_grad ? &input->grad_slot() : nullptr;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

// 4x8 tile of C += A * B over the full k extent, accumulating in ascending p.
// A(r, p) = a[r * lda + p]; B and C are row-major with leading dimensions ldb, ldc.
inline void gemm_tile_4x8(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
                          std::size_t ldc, std::size_t k) {
#if defined(__AVX2__) && defined(__FMA__)
  __m256d acc[4][2];
  for (std::size_t r = 0; r < 4; ++r) {
    acc[r][0] = _mm256_loadu_pd(c + r * ldc);
    acc[r][1] = _mm256_loadu_pd(c + r * ldc + 4);
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * ldb), b1 = _mm256_loadu_pd(b + p * ldb + 4);
    for (std::size_t r = 0; r < 4; ++r) {
      const __m256d x = _mm256_broadcast_sd(a + r * lda + p);
      acc[r][0] = _mm256_fmadd_pd(x, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_pd(x, b1, acc[r][1]);
    }
  }
  for (std::size_t r = 0; r < 4; ++r) {
    _mm256_storeu_pd(c + r * ldc, acc[r][0]);
    _mm256_storeu_pd(c + r * ldc + 4, acc[r][1]);
  }
#else
  double acc[4][8];
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t t = 0; t < 8; ++t) acc[r][t] = c[r * ldc + t];
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t r = 0; r < 4; ++r) {
      const double av = a[r * lda + p];
      for (std::size_t t = 0; t < 8; ++t) acc[r][t] += av * b[p * ldb + t];
    }
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t t = 0; t < 8; ++t) c[r * ldc + t] = acc[r][t];
#endif
}

#if defined(__AVX512F__)
// c[8 x 16] += a[8 x k] * b, b given as two packed 8-column panels.
inline void gemm_tile_8x16(const double* a, std::size_t lda, const double* b_lo, const double* b_hi, double* c,
                           std::size_t ldc, std::size_t k) {
  __m512d acc[8][2];
  for (std::size_t r = 0; r < 8; ++r) {
    acc[r][0] = _mm512_loadu_pd(c + r * ldc);
    acc[r][1] = _mm512_loadu_pd(c + r * ldc + 8);
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m512d b0 = _mm512_loadu_pd(b_lo + p * 8), b1 = _mm512_loadu_pd(b_hi + p * 8);
    for (std::size_t r = 0; r < 8; ++r) {
      const __m512d x = _mm512_set1_pd(a[r * lda + p]);
      acc[r][0] = _mm512_fmadd_pd(x, b0, acc[r][0]);
      acc[r][1] = _mm512_fmadd_pd(x, b1, acc[r][1]);
    }
  }
  for (std::size_t r = 0; r < 8; ++r) {
    _mm512_storeu_pd(c + r * ldc, acc[r][0]);
    _mm512_storeu_pd(c + r * ldc + 8, acc[r][1]);
  }
}
#endif

// c[m x n] += a[m x k] * b[k x n]. Rows of b are taken in k-blocks whose 8-column panels are
// packed contiguously; blocks run in ascending k so every entry sums its products in order.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  const std::size_t m4 = m - m % 4, n8 = n - n % 8;
  if (m4 > 0 && n8 > 0) {
    const std::size_t kb_max = std::clamp<std::size_t>(32768 / n8, 16, std::max<std::size_t>(k, 16));
    thread_local std::vector<double> packed;
    if (packed.size() < kb_max * n8) packed.resize(kb_max * n8);
    for (std::size_t k0 = 0; k0 < k; k0 += kb_max) {
      const std::size_t kb = std::min(kb_max, k - k0);
      for (std::size_t j = 0; j < n8; j += 8) {
        double* panel = packed.data() + j * kb;
        for (std::size_t p = 0; p < kb; ++p)
          for (std::size_t t = 0; t < 8; ++t) panel[p * 8 + t] = b[(k0 + p) * n + j + t];
      }
      auto tiles_4x8 = [&](std::size_t i0, std::size_t i1, std::size_t j0, std::size_t j1) {
        for (std::size_t i = i0; i < i1; i += 4)
          for (std::size_t j = j0; j < j1; j += 8)
            gemm_tile_4x8(a + i * k + k0, k, packed.data() + j * kb, 8, c + i * n + j, n, kb);
      };
#if defined(__AVX512F__)
      const std::size_t m8 = m - m % 8, n16 = n - n % 16;
      for (std::size_t i = 0; i < m8; i += 8)
        for (std::size_t j = 0; j < n16; j += 16)
          gemm_tile_8x16(a + i * k + k0, k, packed.data() + j * kb, packed.data() + (j + 8) * kb, c + i * n + j, n,
                         kb);
      tiles_4x8(0, m8, n16, n8);
      tiles_4x8(m8, m4, 0, n8);
#else
      tiles_4x8(0, m4, 0, n8);
#endif
    }
  }
  auto edge = [&](std::size_t r0, std::size_t r1, std::size_t j0, std::size_t j1) {
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t j = j0; j < j1; ++j) {
        double acc = c[r * n + j];
        for (std::size_t p = 0; p < k; ++p) acc += a[r * k + p] * b[p * n + j];
        c[r * n + j] = acc;
      }
  };
  edge(0, m4, n8, n);
  edge(m4, m, 0, n);
}

#if defined(__AVX2__) && defined(__FMA__)
namespace exp_consts {
inline constexpr double kLog2e = 1.4426950408889634074;
inline constexpr double kLn2Hi = 6.93147180369123816490e-01;
inline constexpr double kLn2Lo = 1.90821492927058770002e-10;
inline constexpr double kShifter = 6755399441055744.0;  // 1.5 * 2^52
inline constexpr double kLo = -745.2;
inline constexpr double kHi = 709.7;
// 1/13! ... 1/0!, Horner order
inline constexpr double kPoly[14] = {1.0 / 6227020800.0, 1.0 / 479001600.0, 1.0 / 39916800.0, 1.0 / 3628800.0,
                                     1.0 / 362880.0,     1.0 / 40320.0,     1.0 / 5040.0,       1.0 / 720.0,
                                     1.0 / 120.0,        1.0 / 24.0,        1.0 / 6.0,          0.5,
                                     1.0,                1.0};
}  // namespace exp_consts

// exp via x = k ln2 + r, |r| <= ln2 / 2, and a degree-13 Taylor polynomial (within one ulp of std::exp).
inline double exp_scalar(double x) {
  using namespace exp_consts;
  const double xc = std::min(std::max(x, kLo), kHi);
  const double kf = std::fma(xc, kLog2e, kShifter);
  const double kd = kf - kShifter;
  const std::int64_t k = std::bit_cast<std::int64_t>(kf) - std::bit_cast<std::int64_t>(kShifter);
  const double r = std::fma(-kd, kLn2Lo, std::fma(-kd, kLn2Hi, xc));
  double p = kPoly[0];
  for (std::size_t i = 1; i < 14; ++i) p = std::fma(p, r, kPoly[i]);
  // 2^k as two normal factors so subnormal results keep their precision.
  const std::int64_t k1 = ((k + 2048) >> 1) - 1024, k2 = k - k1;
  double y = p * std::bit_cast<double>((k1 + 1023) << 52) * std::bit_cast<double>((k2 + 1023) << 52);
  if (x < kLo) y = 0.0;
  if (x > kHi) y = HUGE_VAL;
  return x != x ? x : y;
}

inline __m256d exp_avx2(__m256d x) {
  using namespace exp_consts;
  const __m256d xc = _mm256_min_pd(_mm256_max_pd(x, _mm256_set1_pd(kLo)), _mm256_set1_pd(kHi));
  const __m256d shifter = _mm256_set1_pd(kShifter);
  const __m256d kf = _mm256_fmadd_pd(xc, _mm256_set1_pd(kLog2e), shifter);
  const __m256d kd = _mm256_sub_pd(kf, shifter);
  const __m256i k = _mm256_sub_epi64(_mm256_castpd_si256(kf), _mm256_castpd_si256(shifter));
  const __m256d r =
      _mm256_fnmadd_pd(kd, _mm256_set1_pd(kLn2Lo), _mm256_fnmadd_pd(kd, _mm256_set1_pd(kLn2Hi), xc));
  __m256d p = _mm256_set1_pd(kPoly[0]);
  for (std::size_t i = 1; i < 14; ++i) p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(kPoly[i]));
  const __m256i k1 = _mm256_sub_epi64(_mm256_srli_epi64(_mm256_add_epi64(k, _mm256_set1_epi64x(2048)), 1),
                                      _mm256_set1_epi64x(1024));
  const __m256i k2 = _mm256_sub_epi64(k, k1);
  const __m256i bias = _mm256_set1_epi64x(1023);
  const __m256d s1 = _mm256_castsi256_pd(_mm256_slli_epi64(_mm256_add_epi64(k1, bias), 52));
  const __m256d s2 = _mm256_castsi256_pd(_mm256_slli_epi64(_mm256_add_epi64(k2, bias), 52));
  __m256d y = _mm256_mul_pd(_mm256_mul_pd(p, s1), s2);
  y = _mm256_blendv_pd(y, _mm256_setzero_pd(), _mm256_cmp_pd(x, _mm256_set1_pd(kLo), _CMP_LT_OQ));
  y = _mm256_blendv_pd(y, _mm256_set1_pd(HUGE_VAL), _mm256_cmp_pd(x, _mm256_set1_pd(kHi), _CMP_GT_OQ));
  return _mm256_blendv_pd(y, x, _mm256_cmp_pd(x, x, _CMP_UNORD_Q));
}
#endif

// v[i] = exp(v[i] - shift) in place; returns the sum of the results.
inline double exp_shifted_inplace(double* v, std::size_t n, double shift) {
  double total = 0.0;
#if defined(__AVX2__) && defined(__FMA__)
  std::size_t i = 0;
  const __m256d sh = _mm256_set1_pd(shift);
  for (; i + 4 <= n; i += 4) {
    const __m256d e = exp_avx2(_mm256_sub_pd(_mm256_loadu_pd(v + i), sh));
    _mm256_storeu_pd(v + i, e);
  }
  for (; i < n; ++i) v[i] = exp_scalar(v[i] - shift);
#else
  for (std::size_t i = 0; i < n; ++i) v[i] = std::exp(v[i] - shift);
#endif
  for (std::size_t i = 0; i < n; ++i) total += v[i];
  return total;
}

inline void transpose_into(const double* x, std::size_t rows, std::size_t cols, double* t) {
  constexpr std::size_t B = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += B)
    for (std::size_t q0 = 0; q0 < cols; q0 += B)
      for (std::size_t r = r0; r < std::min(rows, r0 + B); ++r)
        for (std::size_t q = q0; q < std::min(cols, q0 + B); ++q) t[q * rows + r] = x[r * cols + q];
}

// c[m x k] += g[m x n] * b[k x n]^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  std::vector<double> bt(k * n);
  transpose_into(b, k, n, bt.data());
  gemm_nn(g, bt.data(), c, m, n, k);
}

// c[k x n] += a[m x k]^T * g[m x n]. Transposes a when it is the smaller operand,
// otherwise accumulates c^T += g^T a and transposes back.
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  if (m * k <= m * n + 2 * k * n) {
    std::vector<double> at(m * k);
    transpose_into(a, m, k, at.data());
    gemm_nn(at.data(), g, c, k, m, n);
    return;
  }
  std::vector<double> gt(m * n), ct(k * n);
  transpose_into(g, m, n, gt.data());
  transpose_into(c, k, n, ct.data());
  gemm_nn(gt.data(), a, ct.data(), n, m, k);
  transpose_into(ct.data(), n, k, c);
}

}  // namespace detail

/// Matrix product of a[m x k] and b[k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result(
      {m, n}, std::move(out), "matmul", {a, b},
      [m, k, n](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
        if (auto* ga = detail::grad_target(in[0])) {
          detail::gemm_nt(o.grad.data(), in[1]->data.data(), ga->data(), m, k, n);
        }
        if (auto* gb = detail::grad_target(in[1])) {
          detail::gemm_tn(in[0]->data.data(), o.grad.data(), gb->data(), m, k, n);
        }
      });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), "add", {a, b},
                             [](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                               for (const auto& input : in) {
                                 if (auto* g = detail::grad_target(input)) {
                                   for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
                                 }
                               }
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), "sub", {a, b},
                             [](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                               if (auto* g = detail::grad_target(in[0])) {
                                 for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
                               }
                               if (auto* g = detail::grad_target(in[1])) {
                                 for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= o.grad[i];
                               }
                             });
}

/// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), "mul", {a, b},
                             [](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                               if (auto* g = detail::grad_target(in[0])) {
                                 for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * in[1]->data[i];
                               }
                               if (auto* g = detail::grad_target(in[1])) {
                                 for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * in[0]->data[i];
                               }
                             });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return detail::make_result(a.shape(), std::move(out), "scale", {a},
                             [factor](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                               auto& g = in[0]->grad_slot();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
                             });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return detail::make_result({c, r}, std::move(out), "transpose", {a},
                             [r, c](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                               auto& g = in[0]->grad_slot();
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
                             });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), "reshape", {a},
                             [](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                               auto& g = in[0]->grad_slot();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                             });
}

namespace detail {

/// Neumaier-compensated running sum; full reductions to a scalar use it so the
/// result carries close to one rounding regardless of length.
class CompensatedSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    comp_ += std::abs(sum_) >= std::abs(v) ? (sum_ - t) + v : (v - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline double accurate_sum(std::span<const double> values) {
  CompensatedSum acc;
  for (double v : values) acc.add(v);
  return acc.value();
}

}  // namespace detail

inline Tensor sum(const Tensor& a) {
  const double s = detail::accurate_sum(a.data());
  return detail::make_result({}, {s}, "sum", {a},
                             [](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                               auto& g = in[0]->grad_slot();
                               for (double& v : g) v += o.grad[0];
                             });
}

inline Tensor mean(const Tensor& a) {
  const double s = detail::accurate_sum(a.data());
  const double n = static_cast<double>(a.size());
  return detail::make_result({}, {s / n}, "mean", {a},
                             [n](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                               auto& g = in[0]->grad_slot();
                               for (double& v : g) v += o.grad[0] / n;
                             });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return detail::make_result(a.shape(), std::move(out), "relu", {a},
                             [](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                               auto& g = in[0]->grad_slot();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (in[0]->data[i] > 0.0) g[i] += o.grad[i];
                             });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * a[i] * (1.0 + std::erf(a[i] * inv_sqrt2));
  return detail::make_result(
      a.shape(), std::move(out), "gelu", {a},
      [](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
        const double inv_sqrt2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        auto& g = in[0]->grad_slot();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double x = in[0]->data[i];
          const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
          const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
          g[i] += o.grad[i] * (cdf + x * pdf);
        }
      });
}

/// Numerically stable softmax along `axis`.
inline Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t n = a.dim(axis);

  std::vector<double> out(a.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = a[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a[base + j * inner]);
      double denom = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(a[base + j * inner] - mx);
        out[base + j * inner] = e;
        denom += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= denom;
    }
  }
  return detail::make_result(
      a.shape(), std::move(out), "softmax", {a},
      [outer, inner, n](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
        auto& g = in[0]->grad_slot();
        for (std::size_t oi = 0; oi < outer; ++oi) {
          for (std::size_t ii = 0; ii < inner; ++ii) {
            const std::size_t base = oi * n * inner + ii;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += o.grad[base + j * inner] * o.data[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t k = base + j * inner;
              g[k] += o.data[k] * (o.grad[k] - dot);
            }
          }
        }
      });
}

inline constexpr double kLayerNormEps = 1e-6;

/// Normalizes over the last axis, then applies gamma and beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: input must have at least one axis");
  const std::size_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                     " do not match channel extent " + std::to_string(c));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / c;

  std::vector<double> xhat(x.size()), rstd(rows), out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (row[j] - mu) * rstd[r];
      out[r * c + j] = xhat[r * c + j] * gamma[j] + beta[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [rows, c, xhat = std::move(xhat), rstd = std::move(rstd)](const detail::TensorImpl& o,
                                                                  std::span<const detail::ImplPtr> in) {
        const auto& gam = in[1]->data;
        if (auto* gx = detail::grad_target(in[0])) {
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double d = o.grad[r * c + j] * gam[j];
              mean_d += d;
              mean_dx += d * xhat[r * c + j];
            }
            mean_d /= static_cast<double>(c);
            mean_dx /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const double d = o.grad[r * c + j] * gam[j];
              (*gx)[r * c + j] += rstd[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
            }
          }
        }
        if (auto* gg = detail::grad_target(in[1])) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) (*gg)[j] += o.grad[r * c + j] * xhat[r * c + j];
        }
        if (auto* gb = detail::grad_target(in[2])) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) (*gb)[j] += o.grad[r * c + j];
        }
      });
}

/// Mean negative log-likelihood of integer targets under row-softmax of logits[R x K].
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  }
  std::vector<double> probs(logits.size());
  detail::CompensatedSum total;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      throw ConfigError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(k) + ")");
    }
    const double* row = logits.data().data() + r * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    const double log_denom = std::log(denom);
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(row[j] - mx - log_denom);
    total.add(log_denom - (row[t] - mx));
  }
  std::vector<int> saved(targets.begin(), targets.end());
  return detail::make_result(
      {}, {total.value() / static_cast<double>(rows)}, "cross_entropy", {logits},
      [rows, k, probs = std::move(probs), saved = std::move(saved)](const detail::TensorImpl& o,
                                                                      std::span<const detail::ImplPtr> in) {
        auto& g = in[0]->grad_slot();
        const double s = o.grad[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < k; ++j) {
            const double target = static_cast<std::size_t>(saved[r]) == j ? 1.0 : 0.0;
            g[r * k + j] += s * (probs[r * k + j] - target);
          }
        }
      });
}

/// Row gather: out[i] = a[indices[i]] for a[R x C].
inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices) {
  detail::require_rank(a, 2, "gather_rows");
  const std::size_t rows = a.dim(0), c = a.dim(1);
  std::vector<double> out(indices.size() * c);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw ShapeError("gather_rows: index out of range");
    std::copy_n(a.data().data() + indices[i] * c, c, out.data() + i * c);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return detail::make_result({indices.size(), c}, std::move(out), "gather_rows", {a},
                             [c, idx = std::move(idx)](const detail::TensorImpl& o,
                                                       std::span<const detail::ImplPtr> in) {
                               auto& g = in[0]->grad_slot();
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                 for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += o.grad[i * c + j];
                             });
}

/// Columns [begin, end) of a[R x C].
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a, 2, "slice_cols");
  const std::size_t rows = a.dim(0), c = a.dim(1);
  if (begin >= end || end > c) throw ShapeError("slice_cols: bad column range for " + shape_str(a.shape()));
  const std::size_t w = end - begin;
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(a.data().data() + r * c + begin, w, out.data() + r * w);
  return detail::make_result({rows, w}, std::move(out), "slice_cols", {a},
                             [rows, c, w, begin](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                               auto& g = in[0]->grad_slot();
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t j = 0; j < w; ++j) g[r * c + begin + j] += o.grad[r * w + j];
                             });
}

/// Concatenates 2-D tensors with equal row counts along the column axis.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows) throw ShapeError("concat_cols: row counts differ");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(parts[k].data().data() + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  return detail::make_result({rows, total}, std::move(out), "concat_cols", parts,
                             [rows, total, widths](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < in.size(); ++k) {
                                 if (auto* g = detail::grad_target(in[k])) {
                                   for (std::size_t r = 0; r < rows; ++r)
                                     for (std::size_t j = 0; j < widths[k]; ++j)
                                       (*g)[r * widths[k] + j] += o.grad[r * total + off + j];
                                 }
                                 off += widths[k];
                               }
                             });
}

/// Concatenates tensors along axis 0; trailing extents must agree.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape tail(parts.front().shape().begin() + 1, parts.front().shape().end());
  std::size_t lead = 0;
  std::vector<std::size_t> sizes;
  for (const Tensor& p : parts) {
    if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw ShapeError("concat_rows: trailing extents differ");
    }
    lead += p.dim(0);
    sizes.push_back(p.size());
  }
  std::vector<double> out;
  out.reserve(lead * numel(tail));
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return detail::make_result(std::move(shape), std::move(out), "concat_rows", parts,
                             [sizes](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < in.size(); ++k) {
                                 if (auto* g = detail::grad_target(in[k]))
                                   for (std::size_t i = 0; i < sizes[k]; ++i) (*g)[i] += o.grad[off + i];
                                 off += sizes[k];
                               }
                             });
}

}  // namespace great
