// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "great/tensor.hpp"

namespace great {

struct EvalResult {
  double miou = 0.0;
  double pixacc = 0.0;
  std::vector<double> class_iou;  // NaN for classes absent from both prediction and ground truth
};

/// Dataset-level mIoU and pixel accuracy.
///
/// Intersections and unions are accumulated over every pixel of every image
/// before dividing; classes absent from both sides are left out of the mean.
inline EvalResult evaluate(std::span<const Tensor> pred, std::span<const Tensor> gt, std::size_t classes) {
  if (pred.size() != gt.size()) {
    throw ShapeError("evaluate: " + std::to_string(pred.size()) + " predictions for " + std::to_string(gt.size()) +
                     " ground-truth masks");
  }
  if (classes == 0) throw ConfigError("evaluate: class count must be positive");
  std::vector<std::uint64_t> inter(classes, 0), pred_count(classes, 0), gt_count(classes, 0);
  std::uint64_t correct = 0, total = 0;
  auto class_of = [classes](double v) {
    if (!(v >= 0.0) || v != std::floor(v) || v >= static_cast<double>(classes)) {
      throw ConfigError("evaluate: mask value " + std::to_string(v) + " is not a class id in [0, " +
                        std::to_string(classes) + ")");
    }
    return static_cast<std::size_t>(v);
  };
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].shape() != gt[i].shape()) {
      throw ShapeError("evaluate: prediction " + shape_str(pred[i].shape()) + " vs ground truth " +
                       shape_str(gt[i].shape()));
    }
    for (std::size_t p = 0; p < pred[i].size(); ++p) {
      const std::size_t a = class_of(pred[i][p]), b = class_of(gt[i][p]);
      ++pred_count[a];
      ++gt_count[b];
      if (a == b) {
        ++inter[a];
        ++correct;
      }
      ++total;
    }
  }
  EvalResult r;
  r.class_iou.assign(classes, std::numeric_limits<double>::quiet_NaN());
  double acc = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::uint64_t uni = pred_count[c] + gt_count[c] - inter[c];
    if (uni == 0) continue;
    r.class_iou[c] = static_cast<double>(inter[c]) / static_cast<double>(uni);
    acc += r.class_iou[c];
    ++present;
  }
  r.miou = present ? acc / static_cast<double>(present) : 0.0;
  r.pixacc = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return r;
}

/// One line of the metrics stream.
struct MetricsRecord {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> miou;
  std::optional<double> pixacc;
  double wall_ms = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"step", step}, {"loss", loss}};
    if (miou) j["miou"] = *miou;
    if (pixacc) j["pixacc"] = *pixacc;
    j["wall_ms"] = wall_ms;
    return j;
  }

  /// Everything except wall time, which is the only field allowed to differ between identical runs.
  bool same_values(const MetricsRecord& o) const {
    return step == o.step && loss == o.loss && miou == o.miou && pixacc == o.pixacc;
  }
};

}  // namespace great
