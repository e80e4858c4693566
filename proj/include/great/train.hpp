// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "great/config.hpp"
#include "great/container.hpp"
#include "great/dataset.hpp"
#include "great/encoder.hpp"
#include "great/metrics.hpp"

namespace great {

inline Container model_to_container(Model& model, const RunConfig& run) {
  Container c;
  RunConfig stored = run;
  stored.model = model.config;
  c.meta = {{"kind", "checkpoint"}, {"config", to_json(stored)}};
  for (const auto& p : model.parameters()) c.tensors.push_back({p.name, *p.tensor});
  return c;
}

struct LoadedModel {
  Model model;
  RunConfig run;
};

inline LoadedModel model_from_container(const Container& c) {
  if (!c.meta.contains("config")) throw ConfigError("checkpoint metadata has no config");
  LoadedModel out{{}, run_config_from_json(c.meta.at("config"))};
  out.model = Model::init(out.run.model);
  auto params = out.model.parameters();
  if (params.size() != c.tensors.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, model registers " +
                      std::to_string(params.size()));
  }
  for (auto& p : params) {
    const Tensor& stored = c.at(p.name);
    if (stored.shape() != p.tensor->shape()) {
      throw ConfigError("checkpoint tensor " + p.name + " has shape " + shape_str(stored.shape()) + ", expected " +
                        shape_str(p.tensor->shape()));
    }
    *p.tensor = stored.detach(true);
  }
  return out;
}

inline void save_checkpoint(const std::string& path, Model& model, const RunConfig& run) {
  write_container(path, model_to_container(model, run));
}

inline LoadedModel load_checkpoint(const std::string& path) { return model_from_container(read_container(path)); }

inline std::vector<Tensor> predict_masks(const Model& model, const std::vector<Tensor>& images) {
  NoGradGuard no_grad;
  std::vector<Tensor> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back(model.forward(im).mask);
  return out;
}

inline EvalResult evaluate_model(const Model& model, const SyntheticDataset& ds) {
  const auto pred = predict_masks(model, ds.images);
  return evaluate(pred, ds.masks, model.config.classes);
}

inline void check_dataset(const ModelConfig& cfg, const SyntheticDataset& ds) {
  if (ds.size() == 0) throw ConfigError("dataset is empty");
  const Tensor& im = ds.images.front();
  if (im.rank() != 3 || im.dim(0) != cfg.height || im.dim(1) != cfg.width || im.dim(2) != cfg.in_channels) {
    throw ConfigError("dataset images are " + shape_str(im.shape()) + " but the config expects " +
                      shape_str({cfg.height, cfg.width, cfg.in_channels}));
  }
  if (ds.classes > cfg.classes) {
    throw ConfigError("dataset has " + std::to_string(ds.classes) + " classes, config only " +
                      std::to_string(cfg.classes));
  }
}

struct TrainResult {
  Model model;
  std::vector<MetricsRecord> metrics;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

/// Plain SGD on mean per-pixel cross-entropy.
///
/// Each epoch visits the dataset in a seed-determined order; batches are
/// consecutive slices of that order. The final record also carries training
/// mIoU and pixel accuracy.
inline TrainResult train(const RunConfig& run, const SyntheticDataset& ds, const MetricsSink& sink = {}) {
  run.model.validate();
  check_dataset(run.model, ds);
  const auto start = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  };

  TrainResult result{Model::init(run.model), {}};
  Model& model = result.model;
  Rng order_rng(run.model.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(ds.size());
  std::size_t cursor = order.size();

  std::vector<std::vector<int>> labels;
  labels.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) labels.push_back(ds.labels(i));

  auto params = model.parameters();
  for (std::size_t step = 0; step < run.steps; ++step) {
    std::vector<Tensor> losses;
    for (std::size_t b = 0; b < run.batch_size; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        order_rng.shuffle(order);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      losses.push_back(segmentation_loss(model.forward(ds.images[idx]).logits, labels[idx]));
    }
    Tensor loss = losses.front();
    for (std::size_t b = 1; b < losses.size(); ++b) loss = add(loss, losses[b]);
    loss = scale(loss, 1.0 / static_cast<double>(losses.size()));

    if (!std::isfinite(loss.item())) {
      throw NumericalError("training diverged: non-finite loss at step " + std::to_string(step));
    }
    backward(loss);
    for (auto& p : params) {
      const auto data = p.tensor->data();
      const auto grad = p.tensor->grad();
      std::vector<double> next(data.begin(), data.end());
      if (!grad.empty()) {
        for (std::size_t i = 0; i < next.size(); ++i) next[i] -= run.lr * grad[i];
      }
      *p.tensor = Tensor(p.tensor->shape(), std::move(next), true);
    }

    MetricsRecord rec;
    rec.step = step;
    rec.loss = loss.item();
    if (step + 1 == run.steps) {
      const EvalResult ev = evaluate_model(model, ds);
      rec.miou = ev.miou;
      rec.pixacc = ev.pixacc;
    }
    rec.wall_ms = elapsed_ms();
    if (sink) sink(rec);
    result.metrics.push_back(rec);
  }
  return result;
}

}  // namespace great
