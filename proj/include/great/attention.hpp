// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "great/ops.hpp"
#include "great/patching.hpp"
#include "great/probe.hpp"
#include "great/random.hpp"

namespace great {

/// Dense multi-head self-attention weights (no biases).
struct MhaWeights {
  std::vector<Tensor> query;  // per head [C' x d_h]
  std::vector<Tensor> key;
  std::vector<Tensor> value;
  Tensor output;  // [(H d_h) x C']

  std::size_t heads() const { return query.size(); }
  std::size_t head_dim() const { return query.front().dim(1); }
  std::size_t channels() const { return output.dim(1); }

  std::size_t parameter_count() const {
    std::size_t n = output.size();
    for (std::size_t h = 0; h < heads(); ++h) n += query[h].size() + key[h].size() + value[h].size();
    return n;
  }

  void validate() const {
    if (query.empty() || key.size() != query.size() || value.size() != query.size()) {
      throw ConfigError("mha: query/key/value head lists must be non-empty and equally long");
    }
    const std::size_t c = channels(), d = head_dim();
    if (c % heads() != 0 || d != c / heads()) {
      throw ConfigError("mha: " + std::to_string(c) + " channels do not split into " + std::to_string(heads()) +
                        " heads of width " + std::to_string(d));
    }
    for (std::size_t h = 0; h < heads(); ++h) {
      for (const Tensor* t : {&query[h], &key[h], &value[h]}) {
        if (t->shape() != Shape{c, d}) {
          throw ShapeError("mha: head projection " + shape_str(t->shape()) + " is not " + shape_str({c, d}));
        }
      }
    }
    if (output.shape() != Shape{heads() * d, c}) {
      throw ShapeError("mha: output map " + shape_str(output.shape()) + " is not " + shape_str({heads() * d, c}));
    }
  }

  /// Every map ~ U(+-1/sqrt(fan_in)).
  static MhaWeights init(std::size_t channels, std::size_t heads, Rng& rng) {
    if (heads == 0 || channels % heads != 0) {
      throw ConfigError("mha: " + std::to_string(channels) + " channels not divisible by " + std::to_string(heads) +
                        " heads");
    }
    const std::size_t d = channels / heads;
    const double in_bound = 1.0 / std::sqrt(static_cast<double>(channels));
    MhaWeights w;
    for (std::size_t h = 0; h < heads; ++h) {
      w.query.push_back(rng.uniform_tensor({channels, d}, -in_bound, in_bound, true));
      w.key.push_back(rng.uniform_tensor({channels, d}, -in_bound, in_bound, true));
      w.value.push_back(rng.uniform_tensor({channels, d}, -in_bound, in_bound, true));
    }
    w.output = rng.uniform_tensor({heads * d, channels}, -in_bound, in_bound, true);
    return w;
  }
};

/// softmax(scale * q k^T) v for one head as a single differentiable op; only the
/// probability matrix is kept for the backward pass.
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale_factor) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw ShapeError("scaled_dot_attention: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()));
  }
  const std::size_t t = q.dim(0), s = k.dim(0), d = q.dim(1), dv = v.dim(1);
  std::vector<double> probs(t * s, 0.0);
  detail::gemm_nt(q.data().data(), k.data().data(), probs.data(), t, s, d);
  detail::record_interaction_state(probs.size());
  for (std::size_t r = 0; r < t; ++r) {
    double* row = probs.data() + r * s;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < s; ++j) {
      row[j] *= scale_factor;
      mx = std::max(mx, row[j]);
    }
    const double denom = detail::exp_shifted_inplace(row, s, mx);
    for (std::size_t j = 0; j < s; ++j) row[j] /= denom;
  }
  std::vector<double> out(t * dv, 0.0);
  detail::gemm_nn(probs.data(), v.data().data(), out.data(), t, s, dv);
  return detail::make_result(
      {t, dv}, std::move(out), "attention", {q, k, v},
      [t, s, d, dv, scale_factor, probs = std::move(probs)](const detail::TensorImpl& o,
                                                            std::span<const detail::ImplPtr> in) {
        if (auto* gv = detail::grad_target(in[2])) detail::gemm_tn(probs.data(), o.grad.data(), gv->data(), t, s, dv);
        auto* gq = detail::grad_target(in[0]);
        auto* gk = detail::grad_target(in[1]);
        if (!gq && !gk) return;
        std::vector<double> ds(t * s, 0.0);
        detail::gemm_nt(o.grad.data(), in[2]->data.data(), ds.data(), t, s, dv);
        for (std::size_t r = 0; r < t; ++r) {
          const double* p = probs.data() + r * s;
          double* row = ds.data() + r * s;
          double dot = 0.0;
          for (std::size_t j = 0; j < s; ++j) dot += row[j] * p[j];
          for (std::size_t j = 0; j < s; ++j) row[j] = scale_factor * p[j] * (row[j] - dot);
        }
        if (gq) detail::gemm_nn(ds.data(), in[1]->data.data(), gq->data(), t, s, d);
        if (gk) detail::gemm_tn(ds.data(), in[0]->data.data(), gk->data(), t, s, d);
      });
}

/// Attention over all N*L^2 tokens; returns the interaction output without residual.
inline TokenGrid mha_forward(const TokenGrid& x, const MhaWeights& w) {
  w.validate();
  if (x.channels() != w.channels()) {
    throw ShapeError("mha_forward: tokens have " + std::to_string(x.channels()) + " channels, weights expect " +
                     std::to_string(w.channels()));
  }
  const Tensor seq = x.flat();
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(w.head_dim()));
  std::vector<Tensor> heads;
  heads.reserve(w.heads());
  for (std::size_t h = 0; h < w.heads(); ++h) {
    const Tensor q = matmul(seq, w.query[h]);
    const Tensor k = matmul(seq, w.key[h]);
    const Tensor v = matmul(seq, w.value[h]);
    heads.push_back(scaled_dot_attention(q, k, v, scale_factor));
  }
  const Tensor merged = heads.size() == 1 ? heads.front() : concat_cols(heads);
  return x.with_tokens(reshape(matmul(merged, w.output), x.tokens.shape()));
}

/// Score-matrix entries per head for T tokens.
inline std::uint64_t attention_state_size(std::uint64_t tokens) { return tokens * tokens; }

}  // namespace great
