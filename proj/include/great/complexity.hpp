// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "great/attention.hpp"
#include "great/encoder.hpp"
#include "great/greab.hpp"
#include "great/probe.hpp"

namespace great {

struct CostItem {
  std::string name;
  std::uint64_t count = 0;
};

/// Closed-form parameter, multiply-accumulate and interaction-state accounting.
struct CostReport {
  std::vector<CostItem> params;           // itemized by submodule, summed over layers
  std::uint64_t total_params = 0;
  std::uint64_t tokens = 0;               // T = N L^2
  std::uint64_t greab_macs = 0;           // one GReaB interaction, all heads
  std::uint64_t greab_projection_macs = 0;
  std::uint64_t greab_diffusion_macs = 0;
  std::uint64_t greab_mapping_macs = 0;
  std::uint64_t greab_state_entries = 0;  // M^2
  std::uint64_t mha_macs = 0;             // one dense MHA, all heads
  std::uint64_t mha_score_macs = 0;       // T^2 d_h summed over heads
  std::uint64_t mha_state_entries = 0;    // T^2 per head
  std::vector<std::pair<std::string, std::string>> analytical_rows;

  std::uint64_t param(const std::string& name) const {
    for (const auto& item : params)
      if (item.name == name) return item.count;
    return 0;
  }
};

/// GReaB parameter count: M N L^2 + depth (M^2 + C'^2).
inline std::uint64_t greab_param_count(std::uint64_t nodes, std::uint64_t patches, std::uint64_t positions,
                                       std::uint64_t channels, std::uint64_t depth) {
  return nodes * patches * positions + depth * (nodes * nodes + channels * channels);
}

inline std::uint64_t interaction_param_count(const ModelConfig& cfg) {
  if (cfg.interaction == InteractionKind::mha) return 4 * cfg.channels * cfg.channels;
  const std::uint64_t width = cfg.channels / cfg.heads;
  return cfg.heads * greab_param_count(cfg.nodes, cfg.patch_count(), cfg.positions(), width, cfg.graph_depth);
}

inline CostReport param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::uint64_t c = cfg.channels, d = cfg.layers;
  CostReport r;
  r.params = {
      {"embed", cfg.in_channels * c},
      {"pos", static_cast<std::uint64_t>(cfg.patch_count()) * cfg.positions() * c},
      {"norms", d * 4 * c},
      {"interaction", d * interaction_param_count(cfg)},
      {"mlp", d * 2 * cfg.mlp_ratio * c * c},
      {"head", c * cfg.classes},
  };
  for (const auto& item : r.params) r.total_params += item.count;
  r.tokens = cfg.token_count();
  return r;
}

/// Efficient-attention variants reported as symbolic space formulas only, never executed.
inline std::vector<std::pair<std::string, std::string>> analytical_space_rows() {
  return {
      {"Spatial Reduction Transformer", "O(H^2 W^2 / r^2)  [analytical only]"},
      {"Sparse Transformer", "O(HW sqrt(HW))  [analytical only]"},
      {"Reformer", "O(HW log(HW))  [analytical only]"},
      {"Cross-Attention", "O(2 HW)  [analytical only]"},
      {"Recurrent Attention", "O(k HW)  [analytical only]"},
      {"Linformer", "O(HW)  [analytical only]"},
      {"Performer", "O(HW)  [analytical only]"},
      {"LongFormer", "O(HW)  [analytical only]"},
      {"Softmax-Free Transformer", "O(HW)  [analytical only]"},
  };
}

/// Multiply-accumulates of one dense MHA over T tokens.
inline std::uint64_t mha_macs(std::uint64_t tokens, std::uint64_t channels) {
  return 4 * tokens * channels * channels + 2 * tokens * tokens * channels;
}

/// Multiply-accumulates of one GReaB (all heads) over T tokens. Projection is
/// counted at 2 M T C', mapping at M T C'.
inline std::uint64_t greab_macs(std::uint64_t tokens, std::uint64_t nodes, std::uint64_t channels,
                                std::uint64_t depth, std::uint64_t heads = 1) {
  const std::uint64_t w = channels / heads;
  const std::uint64_t per_head = 3 * nodes * tokens * w + depth * (nodes * nodes * w + nodes * w * w);
  return heads * per_head;
}

inline CostReport interaction_cost(const ModelConfig& cfg) {
  CostReport r = param_count(cfg);
  const std::uint64_t t = cfg.token_count(), m = cfg.nodes, c = cfg.channels, h = cfg.heads;
  const std::uint64_t w = c / h;
  r.greab_projection_macs = 2 * h * m * t * w;
  r.greab_diffusion_macs = h * cfg.graph_depth * (m * m * w + m * w * w);
  r.greab_mapping_macs = h * m * t * w;
  r.greab_macs = r.greab_projection_macs + r.greab_diffusion_macs + r.greab_mapping_macs;
  r.greab_state_entries = m * m;
  r.mha_score_macs = t * t * c;
  r.mha_macs = mha_macs(t, c);
  r.mha_state_entries = attention_state_size(t);
  r.analytical_rows = analytical_space_rows();
  return r;
}

/// Smallest T such that dense MHA needs more MACs than GReaB for every T' >= T.
///
/// The difference 2C' T^2 + (4C'^2 - 3MC') T - depth (M^2 C' + M C'^2) is a
/// convex quadratic in T, so it stays positive past its larger root.
inline std::uint64_t mha_crossover_tokens(std::uint64_t nodes, std::uint64_t channels, std::uint64_t depth) {
  const double a = 2.0 * static_cast<double>(channels);
  const double b = 4.0 * static_cast<double>(channels * channels) - 3.0 * static_cast<double>(nodes * channels);
  const double cc = -static_cast<double>(depth * (nodes * nodes * channels + nodes * channels * channels));
  const double root = (-b + std::sqrt(b * b - 4.0 * a * cc)) / (2.0 * a);
  std::uint64_t t = root <= 1.0 ? 1 : static_cast<std::uint64_t>(std::floor(root));
  auto exceeds = [&](std::uint64_t tokens) {
    return mha_macs(tokens, channels) > greab_macs(tokens, nodes, channels, depth);
  };
  while (t > 1 && exceeds(t - 1)) --t;
  while (!exceeds(t)) ++t;
  return t;
}

/// Measured interaction-state sizes and timings for one configuration.
struct InteractionMeasurement {
  std::uint64_t greab_state_entries = 0;
  std::uint64_t mha_state_entries = 0;
  double greab_ms = 0.0;           // full block, min over repetitions
  double propagation_ms = 0.0;     // (I - A) G only, min over repetitions
  double diffusion_ms = 0.0;       // ((I - A) G) W_u, min over repetitions
  double mha_ms = 0.0;
};

namespace detail {

template <typename Fn>
double min_time_ms(std::size_t repetitions, std::size_t inner, Fn&& fn) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(repetitions, 1); ++r) {
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < inner; ++i) fn();
    const auto stop = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(stop - start).count() / static_cast<double>(inner));
  }
  return best;
}

}  // namespace detail

/// Runs the interaction blocks on random tokens, recording the buffers they
/// allocate and the minimum wall time over `repetitions` runs.
inline InteractionMeasurement measure_interaction(const ModelConfig& cfg, std::size_t repetitions,
                                                  bool include_mha = true) {
  cfg.validate();
  NoGradGuard no_grad;
  Rng rng(cfg.seed);
  const std::size_t width = cfg.channels / cfg.heads;
  const TokenGrid x{rng.uniform_tensor({cfg.patch_count(), cfg.positions(), cfg.channels}, -1.0, 1.0), cfg.height,
                    cfg.width, cfg.patch};
  std::vector<GreabWeights> heads;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    heads.push_back(GreabWeights::init(cfg.nodes, cfg.patch_count(), cfg.positions(), width, cfg.graph_depth, rng));
  }

  InteractionMeasurement out;
  {
    InteractionProbe probe;
    ScopedProbe scope(probe);
    (void)detail::multi_head_branch(x, heads);
    out.greab_state_entries = probe.peak_entries;
  }
  out.greab_ms = detail::min_time_ms(repetitions, 1, [&] { (void)detail::multi_head_branch(x, heads); });

  // The diffusion step alone, with enough inner iterations to rise above timer resolution.
  const GraphState g{rng.uniform_tensor({cfg.nodes, width}, -1.0, 1.0)};
  const GraphLayer& layer = heads.front().layers.front();
  const std::size_t work = cfg.nodes * cfg.nodes * width + cfg.nodes * width * width;
  const std::size_t inner = std::max<std::size_t>(1, 2'000'000 / std::max<std::size_t>(work, 1));
  out.diffusion_ms = detail::min_time_ms(repetitions, inner, [&] { (void)diffuse(g, layer); });
  const Tensor eye = Tensor::eye(cfg.nodes);
  const std::size_t prop_work = cfg.nodes * cfg.nodes * width;
  const std::size_t prop_inner = std::max<std::size_t>(1, 2'000'000 / std::max<std::size_t>(prop_work, 1));
  out.propagation_ms =
      detail::min_time_ms(repetitions, prop_inner, [&] { (void)matmul(sub(eye, layer.adjacency), g.nodes); });

  if (include_mha) {
    const MhaWeights mha = MhaWeights::init(cfg.channels, cfg.heads, rng);
    InteractionProbe probe;
    {
      ScopedProbe scope(probe);
      (void)mha_forward(x, mha);
    }
    out.mha_state_entries = probe.peak_entries;
    out.mha_ms = detail::min_time_ms(repetitions, 1, [&] { (void)mha_forward(x, mha); });
  }
  return out;
}

}  // namespace great
