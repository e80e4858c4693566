// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "great/tensor.hpp"

namespace great {

/// Seeded generator with a platform-independent uniform mapping.
///
/// std::uniform_real_distribution is implementation-defined, so values are
/// derived directly from the 53 high bits of mt19937_64 instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }

  /// Approximately standard normal (Box-Muller on the uniform mapping).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925 * u2);
  }

  Tensor uniform_tensor(Shape shape, double lo, double hi, bool requires_grad = false) {
    std::vector<double> data(numel(shape));
    for (double& v : data) v = uniform(lo, hi);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  /// Fisher-Yates shuffle with this generator.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace great
