// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "great/attention.hpp"
#include "great/container.hpp"
#include "great/encoder.hpp"
#include "great/gradcheck.hpp"
#include "great/greab.hpp"
#include "great/random.hpp"

namespace great {

struct GradcheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_entries = 0;  // per group; 0 checks every entry
};

struct GroupResult {
  std::string group;
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  bool pass = false;
  std::size_t worst_index = 0;  // entry with the largest relative error
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradcheckReport {
  std::vector<GroupResult> groups;
  double eps = 0.0;
  double tolerance = 0.0;

  bool pass() const {
    return std::all_of(groups.begin(), groups.end(), [](const GroupResult& g) { return g.pass; });
  }

  double max_rel_error() const {
    double worst = 0.0;
    for (const auto& g : groups) worst = std::max(worst, g.max_rel_error);
    return worst;
  }

  std::vector<std::string> failing() const {
    std::vector<std::string> out;
    for (const auto& g : groups)
      if (!g.pass) out.push_back(g.group);
    return out;
  }

  void append(const GradcheckReport& other) { groups.insert(groups.end(), other.groups.begin(), other.groups.end()); }

  nlohmann::json to_json() const {
    nlohmann::json groups_json = nlohmann::json::array();
    for (const auto& g : groups) {
      groups_json.push_back({{"group", g.group},
                             {"max_rel_error", g.max_rel_error},
                             {"entries", g.entries},
                             {"pass", g.pass},
                             {"worst", {{"index", g.worst_index}, {"analytic", g.worst_analytic}, {"numeric", g.worst_numeric}}}});
    }
    return {{"pass", pass()}, {"eps", eps}, {"tolerance", tolerance}, {"groups", groups_json}};
  }
};

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares backward() against central differences for every named input.
inline GradcheckReport check_gradients(const std::vector<NamedTensor>& inputs, const LossFn& loss_fn,
                                       const GradcheckOptions& opt, Rng& rng) {
  std::vector<Tensor> tracked;
  tracked.reserve(inputs.size());
  for (const auto& in : inputs) tracked.push_back(in.tensor.detach(true));
  backward(loss_fn(tracked));

  std::vector<Tensor> frozen;
  for (const auto& in : inputs) frozen.push_back(in.tensor.detach());
  auto eval = [&](std::size_t group, const std::vector<double>& values) {
    NoGradGuard no_grad;
    std::vector<Tensor> args = frozen;
    args[group] = Tensor(frozen[group].shape(), values);
    return loss_fn(args).item();
  };

  GradcheckReport report;
  report.eps = opt.eps;
  report.tolerance = opt.tolerance;
  for (std::size_t g = 0; g < inputs.size(); ++g) {
    const Tensor analytic = tracked[g].grad_tensor();
    std::vector<std::size_t> idx(analytic.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_entries > 0 && idx.size() > opt.max_entries) {
      rng.shuffle(idx);
      idx.resize(opt.max_entries);
      std::sort(idx.begin(), idx.end());
    }
    std::vector<double> values(frozen[g].data().begin(), frozen[g].data().end());
    GroupResult res{inputs[g].name, 0.0, idx.size(), true, 0, 0.0, 0.0};
    for (std::size_t i : idx) {
      const double saved = values[i];
      values[i] = saved + opt.eps;
      const double up = eval(g, values);
      values[i] = saved - opt.eps;
      const double down = eval(g, values);
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericalError("gradcheck: non-finite loss perturbing " + inputs[g].name + "[" + std::to_string(i) + "]");
      }
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double rel = relative_error(analytic[i], numeric);
      if (rel >= res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_index = i;
        res.worst_analytic = analytic[i];
        res.worst_numeric = numeric;
      }
    }
    res.pass = res.max_rel_error < opt.tolerance;
    report.groups.push_back(std::move(res));
  }
  return report;
}

/// Scalar probe loss sum(out * R) with a fixed random R.
inline Tensor projection_loss(const Tensor& out, const Tensor& weights) {
  return sum(mul(out, weights));
}

/// Standalone GReaB sized from the config (first head's channel width).
inline GradcheckReport gradcheck_greab(const ModelConfig& cfg, std::uint64_t seed, const GradcheckOptions& opt) {
  Rng rng(seed);
  const std::size_t n = cfg.patch_count(), l2 = cfg.positions(), c = cfg.channels / cfg.heads;
  std::vector<NamedTensor> inputs;
  inputs.push_back({"greab.x", rng.uniform_tensor({n, l2, c}, -1.0, 1.0)});
  inputs.push_back({"greab.w_proj", rng.uniform_tensor({cfg.nodes, n, l2}, -1.0, 1.0)});
  for (std::size_t k = 0; k < cfg.graph_depth; ++k) {
    inputs.push_back({"greab.graph." + std::to_string(k) + ".adjacency",
                      rng.uniform_tensor({cfg.nodes, cfg.nodes}, -1.0, 1.0)});
    inputs.push_back({"greab.graph." + std::to_string(k) + ".update", rng.uniform_tensor({c, c}, -1.0, 1.0)});
  }
  const Tensor probe = rng.uniform_tensor({n, l2, c}, -1.0, 1.0);
  const std::size_t depth = cfg.graph_depth;
  const std::size_t h = cfg.height, w = cfg.width, l = cfg.patch;
  LossFn loss = [=](const std::vector<Tensor>& t) {
    GreabWeights gw;
    gw.w_proj = t[1];
    for (std::size_t k = 0; k < depth; ++k) gw.layers.push_back({t[2 + 2 * k], t[3 + 2 * k]});
    return projection_loss(greab_forward(TokenGrid{t[0], h, w, l}, gw).tokens, probe);
  };
  return check_gradients(inputs, loss, opt, rng);
}

/// Standalone dense MHA with the config's channel width and head count.
inline GradcheckReport gradcheck_mha(const ModelConfig& cfg, std::uint64_t seed, const GradcheckOptions& opt) {
  Rng rng(seed);
  const std::size_t n = cfg.patch_count(), l2 = cfg.positions(), c = cfg.channels, heads = cfg.heads;
  const std::size_t d = c / heads;
  std::vector<NamedTensor> inputs;
  inputs.push_back({"mha.x", rng.uniform_tensor({n, l2, c}, -1.0, 1.0)});
  for (std::size_t k = 0; k < heads; ++k) {
    const std::string p = "mha." + std::to_string(k) + ".";
    inputs.push_back({p + "query", rng.uniform_tensor({c, d}, -1.0, 1.0)});
    inputs.push_back({p + "key", rng.uniform_tensor({c, d}, -1.0, 1.0)});
    inputs.push_back({p + "value", rng.uniform_tensor({c, d}, -1.0, 1.0)});
  }
  inputs.push_back({"mha.output", rng.uniform_tensor({c, c}, -1.0, 1.0)});
  const Tensor probe = rng.uniform_tensor({n, l2, c}, -1.0, 1.0);
  const std::size_t h = cfg.height, w = cfg.width, l = cfg.patch;
  LossFn loss = [=](const std::vector<Tensor>& t) {
    MhaWeights mw;
    for (std::size_t k = 0; k < heads; ++k) {
      mw.query.push_back(t[1 + 3 * k]);
      mw.key.push_back(t[2 + 3 * k]);
      mw.value.push_back(t[3 + 3 * k]);
    }
    mw.output = t.back();
    return projection_loss(mha_forward(TokenGrid{t[0], h, w, l}, mw).tokens, probe);
  };
  return check_gradients(inputs, loss, opt, rng);
}

/// Full model: cross-entropy of the segmentation head over the encoder, every parameter group.
inline GradcheckReport gradcheck_model(const ModelConfig& cfg, std::uint64_t seed, const GradcheckOptions& opt) {
  ModelConfig seeded = cfg;
  seeded.seed = seed;
  Model base = Model::init(seeded);
  Rng rng(seed ^ 0x5bd1e995ULL);
  const Tensor image = rng.uniform_tensor({cfg.height, cfg.width, cfg.in_channels}, -1.0, 1.0);
  std::vector<int> labels(cfg.height * cfg.width);
  for (int& v : labels) v = static_cast<int>(rng.below(cfg.classes));

  std::vector<NamedTensor> inputs;
  for (const auto& p : base.parameters()) inputs.push_back({"model." + p.name, *p.tensor});
  LossFn loss = [base, image, labels](const std::vector<Tensor>& t) mutable {
    Model m = base;
    auto params = m.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) *params[i].tensor = t[i];
    return segmentation_loss(m.forward(image).logits, labels);
  };
  return check_gradients(inputs, loss, opt, rng);
}

/// Standalone GReaB, standalone MHA and the full model under one report.
inline GradcheckReport run_gradcheck(const ModelConfig& cfg, std::uint64_t seed, const GradcheckOptions& opt = {}) {
  cfg.validate();
  GradcheckReport report = gradcheck_greab(cfg, seed, opt);
  report.append(gradcheck_mha(cfg, seed, opt));
  report.append(gradcheck_model(cfg, seed, opt));
  return report;
}

}  // namespace great
