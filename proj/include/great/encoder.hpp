// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "great/attention.hpp"
#include "great/greab.hpp"
#include "great/ops.hpp"
#include "great/patching.hpp"
#include "great/random.hpp"

namespace great {

enum class InteractionKind { greab, mha };

inline std::string to_string(InteractionKind kind) { return kind == InteractionKind::greab ? "greab" : "mha"; }

inline InteractionKind parse_interaction(const std::string& s) {
  if (s == "greab") return InteractionKind::greab;
  if (s == "mha") return InteractionKind::mha;
  throw ConfigError("interaction must be \"greab\" or \"mha\", got \"" + s + "\"");
}

/// Architecture knobs. Defaults are the desk-scale configuration.
struct ModelConfig {
  std::size_t patch = 8;         // L
  std::size_t channels = 32;     // C'
  std::size_t nodes = 16;        // M
  std::size_t graph_depth = 1;
  std::size_t heads = 1;
  std::size_t layers = 4;        // D
  InteractionKind interaction = InteractionKind::greab;
  std::size_t mlp_ratio = 4;     // r
  std::size_t classes = 3;       // C_cls
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t in_channels = 3;   // C
  std::uint64_t seed = 0;

  std::size_t patch_count() const { return (height / patch) * (width / patch); }
  std::size_t positions() const { return patch * patch; }
  std::size_t token_count() const { return height * width; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(patch, "patch");
    positive(channels, "channels");
    positive(nodes, "nodes");
    positive(graph_depth, "graph_depth");
    positive(heads, "heads");
    positive(mlp_ratio, "mlp_ratio");
    positive(height, "height");
    positive(width, "width");
    positive(in_channels, "in_channels");
    if (classes < 2) throw ConfigError("classes must be at least 2");
    check_divisible(height, width, patch);
    if (channels % heads != 0) {
      throw ConfigError("channels (" + std::to_string(channels) + ") not divisible by heads (" +
                        std::to_string(heads) + ")");
    }
  }
};

/// One encoder layer: pre-norm interaction and pre-norm MLP, each with a residual.
struct GreatLayerWeights {
  Tensor norm1_gamma, norm1_beta;
  Tensor norm2_gamma, norm2_beta;
  std::variant<std::vector<GreabWeights>, MhaWeights> interaction;
  Tensor mlp_in;   // [C' x rC']
  Tensor mlp_out;  // [rC' x C']

  InteractionKind kind() const {
    return std::holds_alternative<MhaWeights>(interaction) ? InteractionKind::mha : InteractionKind::greab;
  }

  static GreatLayerWeights init(const ModelConfig& cfg, Rng& rng) {
    GreatLayerWeights w;
    const std::size_t c = cfg.channels, hidden = cfg.mlp_ratio * cfg.channels;
    w.norm1_gamma = Tensor::full({c}, 1.0, true);
    w.norm1_beta = Tensor::zeros({c}, true);
    w.norm2_gamma = Tensor::full({c}, 1.0, true);
    w.norm2_beta = Tensor::zeros({c}, true);
    if (cfg.interaction == InteractionKind::greab) {
      std::vector<GreabWeights> heads;
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        heads.push_back(GreabWeights::init(cfg.nodes, cfg.patch_count(), cfg.positions(), c / cfg.heads,
                                           cfg.graph_depth, rng));
      }
      w.interaction = std::move(heads);
    } else {
      w.interaction = MhaWeights::init(c, cfg.heads, rng);
    }
    const double in_bound = 1.0 / std::sqrt(static_cast<double>(c));
    const double out_bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    w.mlp_in = rng.uniform_tensor({c, hidden}, -in_bound, in_bound, true);
    w.mlp_out = rng.uniform_tensor({hidden, c}, -out_bound, out_bound, true);
    return w;
  }
};

/// Interaction branch output (residual excluded) for either kind.
inline TokenGrid interaction_forward(const TokenGrid& x, const GreatLayerWeights& w) {
  if (const auto* heads = std::get_if<std::vector<GreabWeights>>(&w.interaction)) {
    return x.with_tokens(detail::multi_head_branch(x, *heads));
  }
  return mha_forward(x, std::get<MhaWeights>(w.interaction));
}

/// y = interaction(norm1(x)) + x; z = mlp(norm2(y)) + y.
inline TokenGrid great_layer_forward(const TokenGrid& x, const GreatLayerWeights& w) {
  const TokenGrid normed = x.with_tokens(layer_norm(x.tokens, w.norm1_gamma, w.norm1_beta));
  const Tensor y = add(interaction_forward(normed, w).tokens, x.tokens);

  const std::size_t rows = x.token_count(), c = x.channels();
  const Tensor h = layer_norm(reshape(y, {rows, c}), w.norm2_gamma, w.norm2_beta);
  const Tensor mlp = matmul(gelu(matmul(h, w.mlp_in)), w.mlp_out);
  return x.with_tokens(add(reshape(mlp, y.shape()), y));
}

/// Partition, embed and run every layer at a single spatial resolution.
inline TokenGrid encoder_forward(const Tensor& image, const std::vector<GreatLayerWeights>& layers,
                                 const PatchEmbedWeights& embed, std::size_t patch) {
  TokenGrid x = embed_and_position(partition(image, patch), embed);
  for (const auto& layer : layers) x = great_layer_forward(x, layer);
  return x;
}

struct SegOutput {
  Tensor logits;  // [H x W x C_cls]
  Tensor mask;    // [H x W], class ids as doubles
};

/// Per-pixel argmax; ties go to the lowest class index.
inline Tensor argmax_mask(const Tensor& logits) {
  detail::require_rank(logits, 3, "argmax_mask");
  const std::size_t h = logits.dim(0), w = logits.dim(1), k = logits.dim(2);
  std::vector<double> mask(h * w);
  for (std::size_t p = 0; p < h * w; ++p) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[p * k + j] > logits[p * k + best]) best = j;
    mask[p] = static_cast<double>(best);
  }
  return Tensor({h, w}, std::move(mask));
}

/// Linear per-token classifier followed by unpatching to image layout.
inline SegOutput seg_head(const TokenGrid& tokens, const Tensor& head) {
  if (head.rank() != 2 || head.dim(0) != tokens.channels()) {
    throw ShapeError("seg_head: head " + shape_str(head.shape()) + " does not accept " +
                     std::to_string(tokens.channels()) + " channels");
  }
  const std::size_t k = head.dim(1);
  const Tensor token_logits = reshape(matmul(tokens.flat(), head), {tokens.patch_count(), tokens.positions(), k});
  SegOutput out;
  out.logits = unpatch(token_logits, tokens.height, tokens.width, tokens.patch);
  out.mask = argmax_mask(out.logits);
  return out;
}

/// Mean per-pixel cross-entropy of image logits [H x W x K] against class ids.
inline Tensor segmentation_loss(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 3, "segmentation_loss");
  return cross_entropy(reshape(logits, {logits.dim(0) * logits.dim(1), logits.dim(2)}), labels);
}

struct NamedParameter {
  std::string name;
  Tensor* tensor;
};

/// Complete segmentation model: embedding, encoder stack and linear head.
struct Model {
  ModelConfig config;
  PatchEmbedWeights embed;
  std::vector<GreatLayerWeights> layers;
  Tensor head;  // [C' x C_cls]

  static Model init(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Model m;
    m.config = cfg;
    m.embed = PatchEmbedWeights::init(cfg.in_channels, cfg.channels, cfg.patch_count(), cfg.positions(), rng);
    for (std::size_t d = 0; d < cfg.layers; ++d) m.layers.push_back(GreatLayerWeights::init(cfg, rng));
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.channels));
    m.head = rng.uniform_tensor({cfg.channels, cfg.classes}, -bound, bound, true);
    return m;
  }

  /// Every trainable tensor with a stable dotted name, in registration order.
  std::vector<NamedParameter> parameters() {
    std::vector<NamedParameter> out;
    out.push_back({"embed.embed", &embed.embed});
    out.push_back({"embed.pos", &embed.pos});
    for (std::size_t d = 0; d < layers.size(); ++d) {
      GreatLayerWeights& l = layers[d];
      const std::string p = "layers." + std::to_string(d) + ".";
      out.push_back({p + "norm1.gamma", &l.norm1_gamma});
      out.push_back({p + "norm1.beta", &l.norm1_beta});
      if (auto* heads = std::get_if<std::vector<GreabWeights>>(&l.interaction)) {
        for (std::size_t h = 0; h < heads->size(); ++h) {
          GreabWeights& g = (*heads)[h];
          const std::string hp = p + "greab." + std::to_string(h) + ".";
          out.push_back({hp + "w_proj", &g.w_proj});
          for (std::size_t k = 0; k < g.layers.size(); ++k) {
            out.push_back({hp + "graph." + std::to_string(k) + ".adjacency", &g.layers[k].adjacency});
            out.push_back({hp + "graph." + std::to_string(k) + ".update", &g.layers[k].update});
          }
        }
      } else {
        MhaWeights& a = std::get<MhaWeights>(l.interaction);
        for (std::size_t h = 0; h < a.heads(); ++h) {
          const std::string hp = p + "mha." + std::to_string(h) + ".";
          out.push_back({hp + "query", &a.query[h]});
          out.push_back({hp + "key", &a.key[h]});
          out.push_back({hp + "value", &a.value[h]});
        }
        out.push_back({p + "mha.output", &a.output});
      }
      out.push_back({p + "norm2.gamma", &l.norm2_gamma});
      out.push_back({p + "norm2.beta", &l.norm2_beta});
      out.push_back({p + "mlp.in", &l.mlp_in});
      out.push_back({p + "mlp.out", &l.mlp_out});
    }
    out.push_back({"head", &head});
    return out;
  }

  std::size_t registered_scalars() {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor->size();
    return n;
  }

  TokenGrid encode(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != config.height || image.dim(1) != config.width ||
        image.dim(2) != config.in_channels) {
      throw ShapeError("model expects images " +
                       shape_str({config.height, config.width, config.in_channels}) + ", got " +
                       shape_str(image.shape()));
    }
    return encoder_forward(image, layers, embed, config.patch);
  }

  SegOutput forward(const Tensor& image) const { return seg_head(encode(image), head); }
};

}  // namespace great
