// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "great/container.hpp"
#include "great/random.hpp"
#include "great/tensor.hpp"

namespace great {

/// Synthetic segmentation scenes: background class 0 with colored
/// rectangles and disks for every other class.
struct SyntheticDataset {
  std::vector<Tensor> images;  // [H x W x 3] in [0, 1]
  std::vector<Tensor> masks;   // [H x W] class ids stored as doubles
  std::uint64_t seed = 0;
  std::size_t classes = 0;

  std::size_t size() const { return images.size(); }

  /// Mask of image i as integer labels in row-major pixel order.
  std::vector<int> labels(std::size_t i) const {
    std::vector<int> out(masks[i].size());
    for (std::size_t p = 0; p < out.size(); ++p) out[p] = static_cast<int>(masks[i][p]);
    return out;
  }
};

/// Base RGB color of a class: dark gray background, evenly spaced hues otherwise.
inline std::array<double, 3> class_color(std::size_t cls, std::size_t classes) {
  if (cls == 0) return {0.15, 0.15, 0.15};
  const double hue = static_cast<double>(cls - 1) / static_cast<double>(classes - 1) * 6.0;
  const double sat = 0.85, val = 0.9;
  const double c = val * sat;
  const double x = c * (1.0 - std::abs(std::fmod(hue, 2.0) - 1.0));
  const double m = val - c;
  std::array<double, 3> rgb{};
  switch (static_cast<int>(hue) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (double& v : rgb) v += m;
  return rgb;
}

inline SyntheticDataset gen_synthetic(std::uint64_t seed, std::size_t count, std::size_t size, std::size_t classes) {
  if (count == 0) throw ConfigError("gen_synthetic: count must be positive");
  if (size < 4) throw ConfigError("gen_synthetic: size must be at least 4");
  if (classes < 2) throw ConfigError("gen_synthetic: need at least 2 classes");

  constexpr double kNoise = 0.05;
  constexpr double kJitter = 0.05;
  Rng rng(seed);
  SyntheticDataset ds;
  ds.seed = seed;
  ds.classes = classes;
  const double side = static_cast<double>(size);

  for (std::size_t item = 0; item < count; ++item) {
    std::vector<int> label(size * size, 0);
    // Paint foreground classes in a random order, one to two shapes each.
    std::vector<std::size_t> order;
    for (std::size_t c = 1; c < classes; ++c) order.push_back(c);
    rng.shuffle(order);
    for (std::size_t cls : order) {
      const std::size_t shapes = 1 + rng.below(2);
      for (std::size_t s = 0; s < shapes; ++s) {
        const bool disk = rng.uniform() < 0.5;
        const double extent = side * rng.uniform(0.15, 0.3);
        const double cy = rng.uniform(extent, side - extent);
        const double cx = rng.uniform(extent, side - extent);
        const double aspect = rng.uniform(0.6, 1.4);
        for (std::size_t y = 0; y < size; ++y) {
          for (std::size_t x = 0; x < size; ++x) {
            const double dy = (static_cast<double>(y) + 0.5 - cy) / extent;
            const double dx = (static_cast<double>(x) + 0.5 - cx) / (extent * aspect);
            const bool inside = disk ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
            if (inside) label[y * size + x] = static_cast<int>(cls);
          }
        }
      }
    }

    std::vector<std::array<double, 3>> palette(classes);
    for (std::size_t c = 0; c < classes; ++c) {
      palette[c] = class_color(c, classes);
      for (double& v : palette[c]) v += rng.uniform(-kJitter, kJitter);
    }
    std::vector<double> pixels(size * size * 3);
    std::vector<double> mask(size * size);
    for (std::size_t p = 0; p < size * size; ++p) {
      mask[p] = static_cast<double>(label[p]);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        pixels[p * 3 + ch] = std::clamp(palette[label[p]][ch] + kNoise * rng.normal(), 0.0, 1.0);
      }
    }
    ds.images.emplace_back(Shape{size, size, 3}, std::move(pixels));
    ds.masks.emplace_back(Shape{size, size}, std::move(mask));
  }
  return ds;
}

/// Dataset file: tensors "images" [count x H x W x 3] and "masks" [count x H x W].
inline Container dataset_to_container(const SyntheticDataset& ds) {
  const std::size_t h = ds.images.front().dim(0), w = ds.images.front().dim(1);
  std::vector<double> images, masks;
  for (const auto& im : ds.images) images.insert(images.end(), im.data().begin(), im.data().end());
  for (const auto& m : ds.masks) masks.insert(masks.end(), m.data().begin(), m.data().end());
  Container c;
  c.meta = {{"kind", "dataset"}, {"seed", ds.seed}, {"classes", ds.classes}, {"count", ds.size()}};
  c.tensors.push_back({"images", Tensor({ds.size(), h, w, 3}, std::move(images))});
  c.tensors.push_back({"masks", Tensor({ds.size(), h, w}, std::move(masks))});
  return c;
}

inline SyntheticDataset dataset_from_container(const Container& c) {
  const Tensor& images = c.at("images");
  const Tensor& masks = c.at("masks");
  if (images.rank() != 4 || masks.rank() != 3 || images.dim(0) != masks.dim(0) || images.dim(1) != masks.dim(1) ||
      images.dim(2) != masks.dim(2)) {
    throw ConfigError("dataset images " + shape_str(images.shape()) + " and masks " + shape_str(masks.shape()) +
                      " are not aligned");
  }
  SyntheticDataset ds;
  ds.seed = c.meta.value("seed", std::uint64_t{0});
  ds.classes = c.meta.value("classes", std::size_t{0});
  const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2), ch = images.dim(3);
  for (std::size_t i = 0; i < n; ++i) {
    auto ib = images.data().begin() + static_cast<std::ptrdiff_t>(i * h * w * ch);
    ds.images.emplace_back(Shape{h, w, ch}, std::vector<double>(ib, ib + static_cast<std::ptrdiff_t>(h * w * ch)));
    auto mb = masks.data().begin() + static_cast<std::ptrdiff_t>(i * h * w);
    std::vector<double> m(mb, mb + static_cast<std::ptrdiff_t>(h * w));
    for (double v : m) {
      if (v < 0 || v != std::floor(v) || (ds.classes && v >= static_cast<double>(ds.classes))) {
        throw ConfigError("dataset mask holds invalid class id " + std::to_string(v));
      }
    }
    ds.masks.emplace_back(Shape{h, w}, std::move(m));
  }
  return ds;
}

}  // namespace great
