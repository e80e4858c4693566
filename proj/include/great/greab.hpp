// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "great/ops.hpp"
#include "great/patching.hpp"
#include "great/probe.hpp"
#include "great/random.hpp"

namespace great {

/// One information-diffusion layer: F = ((I - A) G) W_u.
struct GraphLayer {
  Tensor adjacency;  // [M x M]
  Tensor update;     // [C' x C']
};

/// Parameters of one graph reasoning block.
///
/// w_proj[m, n, :] is the 1 x L^2 weight that projects patch n onto node m;
/// the same weights, transposed, map nodes back onto patches.
struct GreabWeights {
  Tensor w_proj;  // [M x N x L^2]
  std::vector<GraphLayer> layers;

  std::size_t node_count() const { return w_proj.dim(0); }
  std::size_t patch_count() const { return w_proj.dim(1); }
  std::size_t positions() const { return w_proj.dim(2); }
  std::size_t depth() const { return layers.size(); }
  std::size_t channels() const { return layers.front().update.dim(0); }

  std::size_t parameter_count() const {
    std::size_t n = w_proj.size();
    for (const auto& layer : layers) n += layer.adjacency.size() + layer.update.size();
    return n;
  }

  void validate() const {
    if (w_proj.rank() != 3) throw ShapeError("greab: w_proj must be [M x N x L^2], got " + shape_str(w_proj.shape()));
    if (layers.empty()) throw ConfigError("greab: graph depth must be at least 1");
    const std::size_t m = node_count(), c = channels();
    for (const auto& layer : layers) {
      if (layer.adjacency.shape() != Shape{m, m}) {
        throw ShapeError("greab: adjacency " + shape_str(layer.adjacency.shape()) + " is not " + shape_str({m, m}));
      }
      if (layer.update.shape() != Shape{c, c}) {
        throw ShapeError("greab: state update " + shape_str(layer.update.shape()) + " is not " + shape_str({c, c}));
      }
    }
  }

  /// w_proj ~ U(+-1/sqrt(N L^2)), A ~ U(+-1/M), W_u ~ U(+-1/sqrt(C')).
  static GreabWeights init(std::size_t nodes, std::size_t patches, std::size_t positions, std::size_t channels,
                           std::size_t depth, Rng& rng) {
    if (nodes == 0) throw ConfigError("greab: node count M must be at least 1");
    if (depth == 0) throw ConfigError("greab: graph depth must be at least 1");
    GreabWeights w;
    const double proj_bound = 1.0 / std::sqrt(static_cast<double>(patches * positions));
    w.w_proj = rng.uniform_tensor({nodes, patches, positions}, -proj_bound, proj_bound, true);
    const double adj_bound = 1.0 / static_cast<double>(nodes);
    const double upd_bound = 1.0 / std::sqrt(static_cast<double>(channels));
    for (std::size_t d = 0; d < depth; ++d) {
      GraphLayer layer;
      layer.adjacency = rng.uniform_tensor({nodes, nodes}, -adj_bound, adj_bound, true);
      layer.update = rng.uniform_tensor({channels, channels}, -upd_bound, upd_bound, true);
      w.layers.push_back(std::move(layer));
    }
    return w;
  }
};

/// Graph node features, one row per node.
struct GraphState {
  Tensor nodes;  // [M x C']
};

namespace detail {

inline void check_projection(const TokenGrid& x, const GreabWeights& w) {
  if (w.w_proj.rank() != 3) throw ShapeError("greab: w_proj must be [M x N x L^2]");
  if (w.patch_count() != x.patch_count()) {
    throw ShapeError("greab: N disagrees (w_proj has " + std::to_string(w.patch_count()) + ", tokens have " +
                     std::to_string(x.patch_count()) + ")");
  }
  if (w.positions() != x.positions()) {
    throw ShapeError("greab: L^2 disagrees (w_proj has " + std::to_string(w.positions()) + ", tokens have " +
                     std::to_string(x.positions()) + ")");
  }
}

inline Tensor projection_matrix(const GreabWeights& w) {
  return reshape(w.w_proj, {w.node_count(), w.patch_count() * w.positions()});
}

}  // namespace detail

/// G_m = sum_n W_mn X_n.
inline GraphState patch_project(const TokenGrid& x, const GreabWeights& w) {
  detail::check_projection(x, w);
  return {matmul(detail::projection_matrix(w), x.flat())};
}

/// F = ((I - A) G) W_u; the identity is never a parameter.
inline GraphState diffuse(const GraphState& g, const GraphLayer& layer) {
  const std::size_t m = g.nodes.dim(0);
  if (layer.adjacency.shape() != Shape{m, m}) {
    throw ShapeError("diffuse: adjacency " + shape_str(layer.adjacency.shape()) + " does not match " +
                     std::to_string(m) + " nodes");
  }
  if (layer.update.rank() != 2 || layer.update.dim(0) != g.nodes.dim(1) || layer.update.dim(1) != g.nodes.dim(1)) {
    throw ShapeError("diffuse: state update " + shape_str(layer.update.shape()) + " does not match node features " +
                     shape_str(g.nodes.shape()));
  }
  const Tensor propagation = sub(Tensor::eye(m), layer.adjacency);
  detail::record_interaction_state(propagation.size());
  return {matmul(matmul(propagation, g.nodes), layer.update)};
}

/// Applies every diffusion layer in order, with no nonlinearity between them.
inline GraphState diffuse_stack(const GraphState& g, const GreabWeights& w) {
  if (w.layers.empty()) throw ConfigError("diffuse_stack: graph depth must be at least 1");
  GraphState state = g;
  for (const auto& layer : w.layers) state = diffuse(state, layer);
  return state;
}

/// Maps node features back onto the patches through the transposed projection (no residual).
inline TokenGrid node_unproject(const GraphState& f, const TokenGrid& x, const GreabWeights& w) {
  detail::check_projection(x, w);
  if (f.nodes.rank() != 2 || f.nodes.dim(0) != w.node_count()) {
    throw ShapeError("node_map: M disagrees (node features " + shape_str(f.nodes.shape()) + ", w_proj has " +
                     std::to_string(w.node_count()) + " nodes)");
  }
  const Tensor mapped = matmul(transpose(detail::projection_matrix(w)), f.nodes);
  return x.with_tokens(reshape(mapped, {x.patch_count(), x.positions(), f.nodes.dim(1)}));
}

/// O_n = sum_m W_mn^T F_m + X_n.
inline TokenGrid node_map(const GraphState& f, const TokenGrid& x, const GreabWeights& w) {
  if (f.nodes.rank() != 2 || f.nodes.dim(1) != x.channels()) {
    throw ShapeError("node_map: node features " + shape_str(f.nodes.shape()) + " do not match " +
                     std::to_string(x.channels()) + " channels");
  }
  const TokenGrid mapped = node_unproject(f, x, w);
  return x.with_tokens(add(mapped.tokens, x.tokens));
}

/// Interaction branch of one block: project, diffuse, map back (residual excluded).
inline TokenGrid greab_branch(const TokenGrid& x, const GreabWeights& w) {
  w.validate();
  return node_unproject(diffuse_stack(patch_project(x, w), w), x, w);
}

inline TokenGrid greab_forward(const TokenGrid& x, const GreabWeights& w) {
  w.validate();
  return node_map(diffuse_stack(patch_project(x, w), w), x, w);
}

namespace detail {

inline Tensor multi_head_branch(const TokenGrid& x, const std::vector<GreabWeights>& heads) {
  if (heads.empty()) throw ConfigError("multi_head_greab: at least one head required");
  const std::size_t c = x.channels(), h = heads.size();
  if (c % h != 0) {
    throw ConfigError("multi_head_greab: " + std::to_string(c) + " channels not divisible by " + std::to_string(h) +
                      " heads");
  }
  const std::size_t width = c / h;
  if (h == 1) return greab_branch(x, heads.front()).tokens;

  const Tensor flat = x.flat();
  std::vector<Tensor> outputs;
  outputs.reserve(h);
  for (std::size_t k = 0; k < h; ++k) {
    if (heads[k].channels() != width) {
      throw ShapeError("multi_head_greab: head " + std::to_string(k) + " state update is " +
                       std::to_string(heads[k].channels()) + " wide, expected " + std::to_string(width));
    }
    const Tensor slice = reshape(slice_cols(flat, k * width, (k + 1) * width), {x.patch_count(), x.positions(), width});
    outputs.push_back(greab_branch(x.with_tokens(slice), heads[k]).flat());
  }
  return reshape(concat_cols(outputs), x.tokens.shape());
}

}  // namespace detail

/// Channel-split GReaB: each head interacts on its own C'/H slice; the residual is added once.
inline TokenGrid multi_head_greab(const TokenGrid& x, const std::vector<GreabWeights>& heads) {
  return x.with_tokens(add(detail::multi_head_branch(x, heads), x.tokens));
}

}  // namespace great
