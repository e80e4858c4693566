// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "great/ops.hpp"
#include "great/random.hpp"
#include "great/tensor.hpp"

namespace great {

/// Embedded image: tokens[N x L^2 x C'] plus the geometry they came from.
struct TokenGrid {
  Tensor tokens;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t patch = 0;

  std::size_t patch_count() const { return tokens.dim(0); }
  std::size_t positions() const { return tokens.dim(1); }
  std::size_t channels() const { return tokens.dim(2); }
  std::size_t token_count() const { return patch_count() * positions(); }

  /// Tokens viewed as a [N*L^2 x C'] matrix.
  Tensor flat() const { return reshape(tokens, {token_count(), channels()}); }

  TokenGrid with_tokens(Tensor t) const { return {std::move(t), height, width, patch}; }
};

/// Non-overlapping tiles of one image, row-major tile order.
struct Patches {
  std::vector<Tensor> tiles;  // each [L^2 x C]
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t patch = 0;
};

inline void check_divisible(std::size_t height, std::size_t width, std::size_t patch) {
  if (patch == 0 || height == 0 || width == 0 || height % patch != 0 || width % patch != 0) {
    throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible into " + std::to_string(patch) + "x" + std::to_string(patch) +
                      " patches (H=" + std::to_string(height) + ", W=" + std::to_string(width) +
                      ", L=" + std::to_string(patch) + ")");
  }
}

/// Pixel index (y * W + x) for every token row n * L^2 + p.
inline std::vector<std::size_t> token_to_pixel(std::size_t height, std::size_t width, std::size_t patch) {
  check_divisible(height, width, patch);
  const std::size_t tiles_x = width / patch;
  const std::size_t n_patches = (height / patch) * tiles_x;
  std::vector<std::size_t> map;
  map.reserve(height * width);
  for (std::size_t n = 0; n < n_patches; ++n) {
    const std::size_t ty = n / tiles_x, tx = n % tiles_x;
    for (std::size_t i = 0; i < patch; ++i)
      for (std::size_t j = 0; j < patch; ++j) map.push_back((ty * patch + i) * width + tx * patch + j);
  }
  return map;
}

/// Inverse of token_to_pixel.
inline std::vector<std::size_t> pixel_to_token(std::size_t height, std::size_t width, std::size_t patch) {
  const auto forward = token_to_pixel(height, width, patch);
  std::vector<std::size_t> inverse(forward.size());
  for (std::size_t r = 0; r < forward.size(); ++r) inverse[forward[r]] = r;
  return inverse;
}

/// Token-ordered copy of an image: [N*L^2 x C] rows in patch order.
inline Tensor partition_flat(const Tensor& image, std::size_t patch) {
  detail::require_rank(image, 3, "partition");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const auto map = token_to_pixel(h, w, patch);
  return gather_rows(reshape(image, {h * w, c}), map);
}

/// Splits image[H x W x C] into N = HW/L^2 flattened tiles of shape [L^2 x C].
inline Patches partition(const Tensor& image, std::size_t patch) {
  const Tensor flat = partition_flat(image, patch);
  const std::size_t l2 = patch * patch, c = image.dim(2);
  const std::size_t n = flat.dim(0) / l2;
  Patches out{{}, image.dim(0), image.dim(1), patch};
  out.tiles.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> tile(flat.data().begin() + k * l2 * c, flat.data().begin() + (k + 1) * l2 * c);
    out.tiles.emplace_back(Shape{l2, c}, std::move(tile));
  }
  return out;
}

/// Reassembles tokens[N x L^2 x K] into an image [H x W x K].
inline Tensor unpatch(const Tensor& tokens, std::size_t height, std::size_t width, std::size_t patch) {
  detail::require_rank(tokens, 3, "unpatch");
  check_divisible(height, width, patch);
  if (tokens.dim(0) * tokens.dim(1) != height * width || tokens.dim(1) != patch * patch) {
    throw ShapeError("unpatch: tokens " + shape_str(tokens.shape()) + " do not tile a " + std::to_string(height) +
                     "x" + std::to_string(width) + " image with L=" + std::to_string(patch));
  }
  const std::size_t k = tokens.dim(2);
  const auto map = pixel_to_token(height, width, patch);
  return reshape(gather_rows(reshape(tokens, {height * width, k}), map), {height, width, k});
}

/// Linear patch embedding and learnable additive position table.
struct PatchEmbedWeights {
  Tensor embed;  // [C x C']
  Tensor pos;    // [N x L^2 x C']

  /// embed ~ U(+-1/sqrt(C)), pos ~ U(+-0.02).
  static PatchEmbedWeights init(std::size_t in_channels, std::size_t channels, std::size_t patches,
                                std::size_t positions, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels));
    PatchEmbedWeights w;
    w.embed = rng.uniform_tensor({in_channels, channels}, -bound, bound, true);
    w.pos = rng.uniform_tensor({patches, positions, channels}, -0.02, 0.02, true);
    return w;
  }
};

/// X_n = P_n * embed + pos_n for every patch.
inline TokenGrid embed_and_position(const Patches& patches, const PatchEmbedWeights& w) {
  if (patches.tiles.empty()) throw ShapeError("embed_and_position: no patches");
  const std::size_t l2 = patches.patch * patches.patch;
  const std::size_t c = patches.tiles.front().dim(1);
  if (w.embed.rank() != 2 || w.embed.dim(0) != c) {
    throw ShapeError("embed_and_position: patch channels " + std::to_string(c) + " do not match embed " +
                     shape_str(w.embed.shape()));
  }
  const std::size_t n = patches.tiles.size(), cp = w.embed.dim(1);
  if (w.pos.shape() != Shape{n, l2, cp}) {
    throw ShapeError("embed_and_position: position table " + shape_str(w.pos.shape()) + " does not match tokens " +
                     shape_str({n, l2, cp}));
  }
  const Tensor flat = concat_rows(patches.tiles);
  const Tensor tokens = add(reshape(matmul(flat, w.embed), {n, l2, cp}), w.pos);
  return {tokens, patches.height, patches.width, patches.patch};
}

}  // namespace great
