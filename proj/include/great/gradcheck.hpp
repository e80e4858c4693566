// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "great/tensor.hpp"

namespace great {

/// Central-difference gradient of a scalar function, one coordinate at a time.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double eps = 1e-5) {
  if (!(eps > 0.0)) throw ConfigError("finite_diff_grad: eps must be positive");
  std::vector<double> probe(x.data().begin(), x.data().end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double up = f(Tensor(x.shape(), probe));
    probe[i] = saved - eps;
    const double down = f(Tensor(x.shape(), probe));
    probe[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericalError("finite_diff_grad: non-finite function value at index " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return Tensor(x.shape(), std::move(grad));
}

/// |a - b| / max(|a|, |b|, 1e-8)
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Largest element-wise relative error between two equally shaped tensors.
inline double max_relative_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_relative_error: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i]));
  return worst;
}

}  // namespace great
