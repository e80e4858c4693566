// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: synthetic data, training, evaluation, gradient
// checks, interaction benchmarks and parameter accounting.
//
// Exit codes: 0 success, 1 validation error, 2 numerical failure.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "great/bench.hpp"
#include "great/complexity.hpp"
#include "great/config.hpp"
#include "great/dataset.hpp"
#include "great/gradcheck_runner.hpp"
#include "great/train.hpp"

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitNumerical = 2;

int cmd_gen_data(std::uint64_t seed, std::size_t count, std::size_t size, std::size_t classes,
                 const std::string& out) {
  const auto ds = great::gen_synthetic(seed, count, size, classes);
  great::write_container(out, great::dataset_to_container(ds));
  std::cout << "wrote " << ds.size() << " images of " << size << "x" << size << " (" << classes << " classes) to "
            << out << '\n';
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_path, const std::string& out_dir) {
  const great::RunConfig run = great::load_run_config(config_path);
  const auto ds = great::dataset_from_container(great::read_container(data_path));
  std::filesystem::create_directories(out_dir);
  const std::string metrics_path = (std::filesystem::path(out_dir) / "metrics.jsonl").string();
  const std::string ckpt_path = (std::filesystem::path(out_dir) / "checkpoint.grt").string();
  std::ofstream metrics(metrics_path);
  if (!metrics) throw great::ConfigError("cannot open " + metrics_path);

  auto result = great::train(run, ds, [&](const great::MetricsRecord& rec) {
    metrics << rec.to_json().dump() << '\n';
    if (rec.step % 100 == 0 || rec.miou) {
      std::cout << "step " << rec.step << " loss " << std::setprecision(6) << rec.loss;
      if (rec.miou) std::cout << " miou " << *rec.miou << " pixacc " << *rec.pixacc;
      std::cout << '\n';
    }
  });
  great::save_checkpoint(ckpt_path, result.model, run);
  std::cout << "checkpoint: " << ckpt_path << "\nmetrics: " << metrics_path << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path) {
  const auto loaded = great::load_checkpoint(ckpt_path);
  const auto ds = great::dataset_from_container(great::read_container(data_path));
  great::check_dataset(loaded.model.config, ds);
  const auto ev = great::evaluate_model(loaded.model, ds);
  nlohmann::json j{{"images", ds.size()}, {"miou", ev.miou}, {"pixacc", ev.pixacc}};
  nlohmann::json per_class = nlohmann::json::array();
  for (double v : ev.class_iou) per_class.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
  j["class_iou"] = per_class;
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& config_path, std::uint64_t seed, double eps, std::size_t max_entries) {
  great::ModelConfig cfg;
  if (!config_path.empty()) {
    cfg = great::load_run_config(config_path).model;
  } else {
    cfg.height = cfg.width = 16;
    cfg.patch = 4;
    cfg.channels = 16;
    cfg.nodes = 8;
    cfg.layers = 2;
  }
  great::GradcheckOptions opt;
  opt.eps = eps;
  opt.max_entries = max_entries;
  const auto report = great::run_gradcheck(cfg, seed, opt);
  for (const auto& g : report.groups) {
    std::cout << std::left << std::setw(40) << g.group << std::setw(8) << g.entries << std::scientific
              << std::setprecision(3) << g.max_rel_error << (g.pass ? "  ok" : "  FAIL") << '\n';
  }
  std::cout << report.to_json().dump() << '\n';
  std::cout << (report.pass() ? "gradcheck: PASS" : "gradcheck: FAIL") << '\n';
  return report.pass() ? 0 : kExitNumerical;
}

int cmd_bench(const std::string& sweep, const std::string& records_path) {
  great::BenchSpec spec;
  if (!sweep.empty() && sweep != "default") {
    nlohmann::json j;
    try {
      if (sweep.front() == '{') {
        j = nlohmann::json::parse(sweep);
      } else {
        std::ifstream in(sweep);
        if (!in) throw great::ConfigError("cannot open sweep file " + sweep);
        j = nlohmann::json::parse(in);
      }
    } catch (const nlohmann::json::exception& e) {
      throw great::ConfigError(std::string("sweep is not valid JSON: ") + e.what());
    }
    spec = great::BenchSpec::from_json(j);
  }
  const auto rows = great::run_bench(spec);
  std::cout << great::format_bench_table(rows);
  if (!records_path.empty()) {
    std::ofstream out(records_path);
    if (!out) throw great::ConfigError("cannot open " + records_path);
    for (const auto& r : rows) out << r.to_json().dump() << '\n';
  } else {
    for (const auto& r : rows) std::cout << r.to_json().dump() << '\n';
  }
  return 0;
}

int cmd_params(const std::string& config_path) {
  const great::RunConfig run = great::load_run_config(config_path);
  const auto report = great::interaction_cost(run.model);
  great::Model model = great::Model::init(run.model);
  std::cout << great::format_cost_report(report);
  std::cout << "registered scalars  " << model.registered_scalars() << '\n';
  auto j = great::cost_report_json(report);
  j["registered_scalars"] = model.registered_scalars();
  std::cout << j.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph reasoning transformer toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::size_t count = 64, size = 32, classes = 3;
  std::string out, config, data, checkpoint, sweep = "default", records;
  double eps = 1e-5;
  std::size_t max_entries = 0;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic segmentation dataset");
  gen->add_option("--seed", seed, "generator seed");
  gen->add_option("--count", count, "number of images");
  gen->add_option("--size", size, "square image side in pixels");
  gen->add_option("--classes", classes, "class count including background");
  gen->add_option("--out", out, "output dataset file")->required();

  auto* tr = app.add_subcommand("train", "train a model with plain SGD");
  tr->add_option("--config", config, "JSON run config")->required();
  tr->add_option("--data", data, "dataset file")->required();
  tr->add_option("--out", out, "output directory for checkpoint.grt and metrics.jsonl")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint (mIoU, PixAcc)");
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--data", data, "dataset file")->required();

  auto* gc = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  gc->add_option("--config", config, "JSON run config (default: 16x16, L=4, C'=16, M=8, 2 layers)");
  gc->add_option("--seed", seed, "seed for weights and inputs");
  gc->add_option("--eps", eps, "finite-difference step");
  gc->add_option("--max-entries", max_entries, "entries sampled per parameter group (0 = all)");

  auto* bench = app.add_subcommand("bench", "interaction cost and timing sweep");
  bench->add_option("--sweep", sweep, "sweep JSON (file path, inline object, or \"default\")");
  bench->add_option("--records", records, "write machine-readable rows to this JSONL file");

  auto* params = app.add_subcommand("params", "parameter and interaction accounting");
  params->add_option("--config", config, "JSON run config")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*gen) return cmd_gen_data(seed, count, size, classes, out);
    if (*tr) return cmd_train(config, data, out);
    if (*ev) return cmd_eval(checkpoint, data);
    if (*gc) return cmd_gradcheck(config, seed, eps, max_entries);
    if (*bench) return cmd_bench(sweep, records);
    if (*params) return cmd_params(config);
  } catch (const great::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return 0;
}
